"""Command-line pipeline: config merging, extraction, and the command
surface end to end on a small synthetic sequence.

The module-scoped fixtures run the real commands once (synth -> extract ->
train-vocab -> detect) and the tests assert on their artifacts.
"""

import json

import numpy as np
import pytest

from hgiloop import ingest, vocab
from hgiloop.cli import (
    RunConfig,
    StageTimer,
    detect_loops,
    extract_sequence,
    load_config,
    load_feature_dir,
    main,
)
from hgiloop.core import FeatureFamily, FrameFeatures
from hgiloop.loopdet import read_detections


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.fusion.s_th == 0.82
        assert cfg.dedup.T == 50.0
        assert cfg.vocab_k == 10 and cfg.vocab_L == 3
        assert cfg.sampler_count == 200
        assert cfg.eval_align == "sim3"

    def test_json_round_trip(self):
        cfg = RunConfig()
        assert json.loads(cfg.json()) == cfg.to_dict()

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(vocab_k=1)
        with pytest.raises(ValueError):
            RunConfig(sampler_count=-1)
        with pytest.raises(ValueError):
            RunConfig(eval_align="icp")


class TestLoadConfig:
    def test_no_inputs_gives_defaults(self):
        assert load_config() == RunConfig()

    def test_document_values_applied(self, tmp_path):
        doc = tmp_path / "cfg.json"
        doc.write_text(json.dumps({"fusion": {"s_th": 0.5}, "vocab": {"k": 4}}))
        cfg = load_config(doc)
        assert cfg.fusion.s_th == 0.5
        assert cfg.vocab_k == 4
        assert cfg.fusion.w_s == 0.3  # untouched default

    def test_flags_override_document(self, tmp_path):
        doc = tmp_path / "cfg.json"
        doc.write_text(json.dumps({"fusion": {"s_th": 0.5}, "sampler": {"seed": 9}}))
        cfg = load_config(doc, fusion_s_th=0.9, sampler_count=77, dedup_T=None)
        assert cfg.fusion.s_th == 0.9
        assert cfg.sampler_seed == 9
        assert cfg.sampler_count == 77
        assert cfg.dedup.T == 50.0  # None override is "not given"

    def test_unknown_sections_and_keys_rejected(self, tmp_path):
        doc = tmp_path / "cfg.json"
        doc.write_text(json.dumps({"fusionn": {}}))
        with pytest.raises(ValueError, match="sections"):
            load_config(doc)
        doc.write_text(json.dumps({"fusion": {"sth": 0.5}}))
        with pytest.raises(ValueError, match="unknown keys"):
            load_config(doc)
        doc.write_text(json.dumps(["fusion"]))
        with pytest.raises(ValueError, match="object"):
            load_config(doc)
        doc.write_text(json.dumps({"fusion": 3}))
        with pytest.raises(ValueError, match="object"):
            load_config(doc)

    def test_unknown_override_rejected(self):
        with pytest.raises(ValueError, match="override"):
            load_config(fusion_sth=0.5)


class TestStageTimer:
    def test_accumulates_and_reports(self):
        timer = StageTimer()
        with timer.stage("load"):
            pass
        with timer.stage("load"):
            pass
        with timer.stage("detect"):
            pass
        assert timer.counts == {"load": 2, "detect": 1}
        lines = timer.report_lines()
        assert len(lines) == 2
        assert lines[0].startswith("timing: detect_mean_ms=")
        assert lines[0].endswith("calls=1")
        assert lines[1].startswith("timing: load_mean_ms=")


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "seq"
    ingest.synth_loop_sequence(ingest.SynthSpec(length=24, seed=5), out)
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, seq_dir):
    out = tmp_path_factory.mktemp("run") / "out"
    rc = main([
        "extract", "--input", str(seq_dir), "--out", str(out),
        "--sampler-count", "50",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def vocab_paths(tmp_path_factory, run_dir):
    voc_dir = tmp_path_factory.mktemp("vocabs")
    paths = {}
    for family in ("salient", "geometric"):
        out = voc_dir / f"{family}.hgiv"
        rc = main([
            "train-vocab", "--features", str(run_dir / "features"),
            "--family", family, "--k", "8", "--L", "2", "--seed", "0",
            "--out", str(out),
        ])
        assert rc == 0
        paths[family] = out
    return paths


class TestExtractSequence:
    def test_artifacts_written(self, seq_dir, run_dir):
        features = run_dir / "features"
        geo = load_feature_dir(features, FeatureFamily.GEOMETRIC)
        sal = load_feature_dir(features, FeatureFamily.SALIENT)
        assert [f.frame_id for f in geo] == list(range(24))
        assert [f.frame_id for f in sal] == list(range(24))
        assert all(f.descriptors.shape[1] == 256 for f in geo)
        assert all(f.descriptors.shape[1] == 128 for f in sal)
        assert sorted(p.name for p in (run_dir / "heatmaps").iterdir()) == [
            ingest.heatmap_file_name(t) for t in range(24)
        ]
        cfg = json.loads((run_dir / "config.json").read_text())
        assert cfg["sampler"]["count"] == 50

    def test_worker_pool_output_is_byte_identical(self, seq_dir, tmp_path):
        manifest = ingest.read_sequence(seq_dir, layout="flat")
        cfg = load_config(sampler_count=50)
        a, b = tmp_path / "w1", tmp_path / "w4"
        extract_sequence(manifest, a, cfg, workers=1)
        extract_sequence(manifest, b, cfg, workers=4)
        names = sorted(p.name for p in (a / "features").iterdir())
        assert names == sorted(p.name for p in (b / "features").iterdir())
        for name in names:
            assert (a / "features" / name).read_bytes() == (b / "features" / name).read_bytes()

    def test_every_third_cadence(self, seq_dir, tmp_path):
        manifest = ingest.read_sequence(seq_dir, layout="flat")
        cfg = load_config(sampler_count=50)
        emitted = extract_sequence(manifest, tmp_path / "et", cfg, every_third=True)
        assert emitted == list(range(0, 24, 3))
        geo = load_feature_dir(tmp_path / "et" / "features", FeatureFamily.GEOMETRIC)
        assert [f.frame_id for f in geo] == emitted

    def test_files_backend_requires_precomputed_inputs(self, seq_dir, tmp_path):
        manifest = ingest.read_sequence(seq_dir, layout="flat")
        with pytest.raises(FileNotFoundError, match="features/"):
            extract_sequence(manifest, tmp_path / "x", load_config(), backend="files")

    def test_files_backend_round_trips_extracted_features(self, seq_dir, run_dir, tmp_path):
        # re-ingest the fallback run's own artifacts through the files backend
        sub = tmp_path / "sub"
        sub.mkdir()
        for t in range(3):
            (sub / f"{t:06d}.pgm").write_bytes(
                ingest.read_sequence(seq_dir, layout="flat").image_path(t).read_bytes()
            )
        feat = sub / "features"
        heat = sub / "heatmaps"
        feat.mkdir()
        heat.mkdir()
        for t in range(3):
            for fam in (FeatureFamily.GEOMETRIC, FeatureFamily.SALIENT):
                name = ingest.feature_file_name(t, fam)
                (feat / name).write_bytes((run_dir / "features" / name).read_bytes())
            name = ingest.heatmap_file_name(t)
            (heat / name).write_bytes((run_dir / "heatmaps" / name).read_bytes())
        manifest = ingest.read_sequence(sub, layout="flat")
        out = tmp_path / "filesrun"
        extract_sequence(manifest, out, load_config(sampler_count=50), backend="files")
        geo = load_feature_dir(out / "features", FeatureFamily.GEOMETRIC)
        assert [f.frame_id for f in geo] == [0, 1, 2]

    def test_invalid_arguments(self, seq_dir, tmp_path):
        manifest = ingest.read_sequence(seq_dir, layout="flat")
        with pytest.raises(ValueError, match="backend"):
            extract_sequence(manifest, tmp_path / "x", load_config(), backend="gpu")
        with pytest.raises(ValueError, match="workers"):
            extract_sequence(manifest, tmp_path / "x", load_config(), workers=0)


class TestLoadFeatureDir:
    def test_family_mismatch_rejected(self, tmp_path):
        frame = FrameFeatures(
            0, FeatureFamily.SALIENT, np.zeros((1, 2)), np.zeros((1, 128), dtype=np.uint8)
        )
        ingest.write_feature_file(tmp_path / "000000.geom.hgif", frame)
        with pytest.raises(ValueError, match="family"):
            load_feature_dir(tmp_path, FeatureFamily.GEOMETRIC)

    def test_duplicate_frame_ids_rejected(self, tmp_path):
        frame = FrameFeatures(
            3, FeatureFamily.GEOMETRIC,
            np.zeros((1, 2), dtype=np.float32), np.ones((1, 4), dtype=np.float32),
        )
        ingest.write_feature_file(tmp_path / "000003.geom.hgif", frame)
        ingest.write_feature_file(tmp_path / "other.geom.hgif", frame)
        with pytest.raises(ValueError, match="duplicate"):
            load_feature_dir(tmp_path, FeatureFamily.GEOMETRIC)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_feature_dir(tmp_path / "nope", FeatureFamily.GEOMETRIC)


class TestDetectLoops:
    def test_vocabulary_family_checked(self, run_dir, vocab_paths):
        vs = vocab.load_vocabulary(vocab_paths["salient"])
        vg = vocab.load_vocabulary(vocab_paths["geometric"])
        with pytest.raises(ValueError, match="vocab-s"):
            detect_loops(run_dir / "features", vg, vg, load_config())
        with pytest.raises(ValueError, match="vocab-g"):
            detect_loops(run_dir / "features", vs, vs, load_config())

    def test_empty_directory_rejected(self, vocab_paths, tmp_path):
        feat = tmp_path / "features"
        feat.mkdir()
        vs = vocab.load_vocabulary(vocab_paths["salient"])
        vg = vocab.load_vocabulary(vocab_paths["geometric"])
        with pytest.raises(ValueError, match="no feature files"):
            detect_loops(feat, vs, vg, load_config())

    def test_unpaired_directory_rejected(self, run_dir, vocab_paths, tmp_path):
        feat = tmp_path / "features"
        feat.mkdir()
        for name in ("000000.geom.hgif", "000000.sal.hgif", "000001.geom.hgif"):
            (feat / name).write_bytes((run_dir / "features" / name).read_bytes())
        vs = vocab.load_vocabulary(vocab_paths["salient"])
        vg = vocab.load_vocabulary(vocab_paths["geometric"])
        with pytest.raises(ValueError, match="unpaired"):
            detect_loops(feat, vs, vg, load_config())

    def test_loop_free_sequence_has_no_detections(self, run_dir, vocab_paths):
        vs = vocab.load_vocabulary(vocab_paths["salient"])
        vg = vocab.load_vocabulary(vocab_paths["geometric"])
        assert detect_loops(run_dir / "features", vs, vg, load_config()) == []


class TestCommands:
    def test_synth_command(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"length": 70, "loops": [[5, 62]], "seed": 3}))
        out = tmp_path / "seq"
        assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
        manifest = ingest.read_sequence(out, layout="flat")
        assert len(manifest) == 70

    def test_synth_rejects_unknown_keys(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"length": 24, "frames": 9}))
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 1
        assert "unknown synth spec keys" in capsys.readouterr().err

    def test_extract_timings_flag(self, seq_dir, tmp_path, capsys):
        rc = main([
            "extract", "--input", str(seq_dir), "--out", str(tmp_path / "o"),
            "--sampler-count", "30", "--timings",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "extracted 24 of 24 frames" in out
        assert "timing: geometric_mean_ms=" in out

    def test_detect_command_writes_config_header(self, run_dir, vocab_paths, tmp_path):
        det = tmp_path / "det.tsv"
        rc = main([
            "detect", "--features", str(run_dir / "features"),
            "--vocab-s", str(vocab_paths["salient"]),
            "--vocab-g", str(vocab_paths["geometric"]),
            "--out", str(det), "--timings",
        ])
        assert rc == 0
        text = det.read_text()
        assert text.startswith("# config: {")
        assert "# timing: quantize_mean_ms=" in text
        assert read_detections(det) == []

    def test_eval_command_with_derived_labels(self, seq_dir, run_dir, vocab_paths, tmp_path, capsys):
        det = tmp_path / "det.tsv"
        main([
            "detect", "--features", str(run_dir / "features"),
            "--vocab-s", str(vocab_paths["salient"]),
            "--vocab-g", str(vocab_paths["geometric"]),
            "--out", str(det),
        ])
        capsys.readouterr()
        report = tmp_path / "report.txt"
        rc = main([
            "eval", "--detections", str(det), "--gt", str(seq_dir / "poses.txt"),
            "--out", str(report),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        # loop-free sequence, no detections: both conventions give 1.0
        assert "precision=1.0" in out and "recall=1.0" in out
        assert report.read_text() == out

    def test_eval_command_with_labels_file(self, seq_dir, run_dir, vocab_paths, tmp_path, capsys):
        det = tmp_path / "det.tsv"
        det.write_text("20\t0\t0.9\t0.1\t0.1\n")
        rc = main([
            "eval", "--detections", str(det), "--labels", str(seq_dir / "labels.tsv"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "detections=1" in out
        assert "fp=1" in out  # the synthetic sequence has no labeled loops

    def test_eval_requires_gt_or_labels(self, tmp_path):
        det = tmp_path / "det.tsv"
        det.write_text("")
        with pytest.raises(SystemExit):
            main(["eval", "--detections", str(det)])

    def test_ate_command(self, seq_dir, capsys):
        poses = str(seq_dir / "poses.txt")
        rc = main(["ate", "--pred", poses, "--gt", poses, "--align", "none"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "ate_rmse_m=0.0" in out

    def test_simhist_command(self, run_dir, tmp_path):
        out = tmp_path / "hist.csv"
        rc = main([
            "simhist", "--features", str(run_dir / "features"),
            "--out", str(out), "--bins", "20",
        ])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config: {")
        assert lines[2] == "bin_center,count,normalized"
        rows = lines[3:]
        assert len(rows) == 20
        total = sum(int(row.split(",")[1]) for row in rows)
        assert total > 0

    def test_errors_exit_one(self, tmp_path, capsys):
        rc = main([
            "extract", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o"),
        ])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")

    def test_detect_missing_features_dir_exits_one(self, vocab_paths, tmp_path, capsys):
        rc = main([
            "detect", "--features", str(tmp_path / "missing"),
            "--vocab-s", str(vocab_paths["salient"]),
            "--vocab-g", str(vocab_paths["geometric"]),
            "--out", str(tmp_path / "det.tsv"),
        ])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert "feature directory not found" in err
