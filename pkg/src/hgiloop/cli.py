"""Command-line front end wiring the pipeline end to end.

One JSON config document carries every tunable (defaults below); individual
flags override the document, and the merged result is echoed as a
"# config: {...}" header into every text output so a run can be reproduced
from its artifacts alone. All commands are deterministic given the config
and seeds, and exit 0 exactly when no error occurred.

Config schema (all keys optional, unknown keys rejected):

    {
      "dedup":   {"T": 50.0, "N": 10, "s_min": 0.6},
      "fusion":  {"w_s": 0.3, "w_g": 0.7, "s_th": 0.82, "min_frame_gap": 10},
      "vocab":   {"k": 10, "L": 3, "seed": 0},
      "sampler": {"count": 200, "seed": 0},
      "eval":    {"r": 1.0, "min_gap": 50, "tol": 10, "align": "sim3"}
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, geom_features, ingest, loopdet, sal_features, vocab
from .core import DedupParams, FeatureFamily, FrameFeatures, FusionParams

_CONFIG_SECTIONS = {
    "dedup": ("T", "N", "s_min"),
    "fusion": ("w_s", "w_g", "s_th", "min_frame_gap"),
    "vocab": ("k", "L", "seed"),
    "sampler": ("count", "seed"),
    "eval": ("r", "min_gap", "tol", "align"),
}


@dataclass(frozen=True)
class RunConfig:
    """Merged run configuration; field invariants are enforced by the owning
    parameter types at construction time."""

    dedup: DedupParams = field(default_factory=DedupParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    vocab_k: int = 10
    vocab_L: int = 3
    vocab_seed: int = 0
    sampler_count: int = 200
    sampler_seed: int = 0
    eval_r: float = 1.0
    eval_min_gap: int = 50
    eval_tol: int = 10
    eval_align: str = "sim3"

    def __post_init__(self):
        if self.vocab_k < 2 or self.vocab_L < 1:
            raise ValueError("vocab.k must be >= 2 and vocab.L >= 1")
        if self.sampler_count < 0:
            raise ValueError("sampler.count must be >= 0")
        if self.eval_r <= 0 or self.eval_min_gap < 0 or self.eval_tol < 0:
            raise ValueError("eval.r must be > 0, eval.min_gap and eval.tol >= 0")
        if self.eval_align not in ("sim3", "none"):
            raise ValueError(f"eval.align must be 'sim3' or 'none', got {self.eval_align!r}")

    def to_dict(self) -> dict:
        return {
            "dedup": {"T": self.dedup.T, "N": self.dedup.N, "s_min": self.dedup.s_min},
            "fusion": {
                "w_s": self.fusion.w_s,
                "w_g": self.fusion.w_g,
                "s_th": self.fusion.s_th,
                "min_frame_gap": self.fusion.min_frame_gap,
            },
            "vocab": {"k": self.vocab_k, "L": self.vocab_L, "seed": self.vocab_seed},
            "sampler": {"count": self.sampler_count, "seed": self.sampler_seed},
            "eval": {
                "r": self.eval_r,
                "min_gap": self.eval_min_gap,
                "tol": self.eval_tol,
                "align": self.eval_align,
            },
        }

    def json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _merge_section(document: dict, section: str, overrides: dict) -> dict:
    """Document values for one section, with non-None overrides on top."""
    body = document.get(section, {})
    if not isinstance(body, dict):
        raise ValueError(f"config section {section!r} must be an object")
    unknown = set(body) - set(_CONFIG_SECTIONS[section])
    if unknown:
        raise ValueError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    merged = dict(body)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def load_config(path=None, **overrides) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON document, and
    flag overrides (flags win). Override keys are section-prefixed, e.g.
    fusion_s_th, sampler_seed, dedup_T."""
    document = {}
    if path is not None:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(document, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        unknown = set(document) - set(_CONFIG_SECTIONS)
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    by_section = {name: {} for name in _CONFIG_SECTIONS}
    for key, value in overrides.items():
        section, _, fname = key.partition("_")
        if section not in _CONFIG_SECTIONS or fname not in _CONFIG_SECTIONS[section]:
            raise ValueError(f"unknown config override {key!r}")
        by_section[section][fname] = value

    dedup = _merge_section(document, "dedup", by_section["dedup"])
    fusion = _merge_section(document, "fusion", by_section["fusion"])
    voc = _merge_section(document, "vocab", by_section["vocab"])
    sam = _merge_section(document, "sampler", by_section["sampler"])
    ev = _merge_section(document, "eval", by_section["eval"])
    return RunConfig(
        dedup=DedupParams(**dedup),
        fusion=FusionParams(**fusion),
        vocab_k=voc.get("k", 10),
        vocab_L=voc.get("L", 3),
        vocab_seed=voc.get("seed", 0),
        sampler_count=sam.get("count", 200),
        sampler_seed=sam.get("seed", 0),
        eval_r=ev.get("r", 1.0),
        eval_min_gap=ev.get("min_gap", 50),
        eval_tol=ev.get("tol", 10),
        eval_align=ev.get("align", "sim3"),
    )


class StageTimer:
    """Wall-clock accumulator per pipeline stage; thread-safe."""

    def __init__(self):
        self.totals: dict = {}
        self.counts: dict = {}
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            with self._lock:
                self.totals[name] = self.totals.get(name, 0.0) + dt
                self.counts[name] = self.counts.get(name, 0) + 1

    def report_lines(self) -> list:
        return [
            f"timing: {name}_mean_ms={1000.0 * self.totals[name] / self.counts[name]:.3f}"
            f" calls={self.counts[name]}"
            for name in sorted(self.totals)
        ]


def extract_sequence(
    manifest: ingest.SequenceManifest,
    out_dir,
    cfg: RunConfig,
    backend: str = "fallback",
    every_third: bool = False,
    workers: int = 1,
    timer: StageTimer = None,
) -> list:
    """Produce per-frame feature files (both families) under out_dir/features
    and, with the fallback backend, heatmaps under out_dir/heatmaps.

    With every_third set, salient features follow the every-three-frames
    cadence: only frames 0, 3, 6, ... are emitted, and their geometric
    features are the triple-frame merge of the deduplicated neighbors
    (sequence edges fall back to the frame's own deduplicated set). Returns
    the emitted frame ids.
    """
    if backend not in ("files", "fallback"):
        raise ValueError(f"backend must be 'files' or 'fallback', got {backend!r}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    timer = timer if timer is not None else StageTimer()
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    heat_dir = out / "heatmaps"
    if backend == "fallback":
        heat_dir.mkdir(parents=True, exist_ok=True)

    n = len(manifest)
    emitted = list(range(0, n, 3)) if every_third else list(range(n))
    salient_frames = set(emitted)

    def per_frame(t: int):
        with timer.stage("load"):
            image = ingest.load_image(manifest.image_path(t))
        if backend == "files":
            if manifest.feature_dir is None:
                raise FileNotFoundError("backend=files requires a features/ directory in the input")
            with timer.stage("geometric"):
                geom = ingest.read_feature_file(
                    manifest.feature_dir / ingest.feature_file_name(t, FeatureFamily.GEOMETRIC)
                )
                if geom.frame_id != t or geom.family is not FeatureFamily.GEOMETRIC:
                    raise ValueError(f"feature file for frame {t} carries wrong id or family")
        else:
            with timer.stage("geometric"):
                geom = ingest.fallback_geometric(image, frame_id=t)
        with timer.stage("dedup"):
            geom = geom_features.dedup_keypoints(geom, cfg.dedup)

        salient = None
        heatmap = None
        if t in salient_frames:
            if backend == "files":
                if manifest.heatmap_dir is None:
                    raise FileNotFoundError("backend=files requires a heatmaps/ directory in the input")
                with timer.stage("saliency"):
                    heatmap = ingest.read_heatmap(
                        manifest.heatmap_dir / ingest.heatmap_file_name(t)
                    )
            else:
                with timer.stage("saliency"):
                    heatmap = ingest.fallback_saliency(image)
            with timer.stage("salient"):
                # Every frame gets the same explicit seed value: identical
                # revisit images then sample identical keypoints.
                salient = sal_features.salient_frame_features(
                    image, heatmap, t, cfg.sampler_count, cfg.sampler_seed
                )
        return geom, salient, heatmap

    if workers == 1:
        results = [per_frame(t) for t in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(per_frame, range(n)))

    for t in emitted:
        geom, salient, heatmap = results[t]
        if every_third and 0 < t < n - 1:
            with timer.stage("merge"):
                geom = geom_features.merge_triplet(
                    results[t - 1][0], geom, results[t + 1][0], cfg.dedup
                )
        with timer.stage("write"):
            ingest.write_feature_file(
                feat_dir / ingest.feature_file_name(t, FeatureFamily.GEOMETRIC), geom
            )
            ingest.write_feature_file(
                feat_dir / ingest.feature_file_name(t, FeatureFamily.SALIENT), salient
            )
            if backend == "fallback":
                ingest.write_heatmap(heat_dir / ingest.heatmap_file_name(t), heatmap)
    return emitted


def _feature_files(directory, family: FeatureFamily) -> list:
    tag = "sal" if family is FeatureFamily.SALIENT else "geom"
    return sorted(Path(directory).glob(f"*.{tag}.hgif"))


def load_feature_dir(directory, family: FeatureFamily) -> list:
    """All feature files of one family in a directory, sorted by frame id."""
    if not Path(directory).is_dir():
        raise ValueError(f"feature directory not found: {directory}")
    frames = [ingest.read_feature_file(p) for p in _feature_files(directory, family)]
    for f in frames:
        if f.family is not family:
            raise ValueError(f"frame {f.frame_id}: expected family {family.name}, got {f.family.name}")
    frames.sort(key=lambda f: f.frame_id)
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate frame ids in {directory}")
    return frames


def detect_loops(features_dir, vocab_s: vocab.Vocabulary, vocab_g: vocab.Vocabulary,
                 cfg: RunConfig, timer: StageTimer = None) -> list:
    """Stream the feature directory through the loop detector in frame order."""
    if vocab_s.family is not FeatureFamily.SALIENT:
        raise ValueError("--vocab-s must be a salient-family vocabulary")
    if vocab_g.family is not FeatureFamily.GEOMETRIC:
        raise ValueError("--vocab-g must be a geometric-family vocabulary")
    timer = timer if timer is not None else StageTimer()
    with timer.stage("read"):
        sal = load_feature_dir(features_dir, FeatureFamily.SALIENT)
        geo = load_feature_dir(features_dir, FeatureFamily.GEOMETRIC)
    sal_ids = [f.frame_id for f in sal]
    geo_ids = [f.frame_id for f in geo]
    if sal_ids != geo_ids:
        raise ValueError(
            f"feature directory is unpaired: salient ids {sal_ids[:5]}... vs geometric {geo_ids[:5]}..."
        )
    if not sal:
        raise ValueError(f"no feature files in {features_dir}")
    detector = loopdet.LoopDetector(params=cfg.fusion)
    for fs, fg in zip(sal, geo):
        with timer.stage("quantize"):
            bow_s = vocab.quantize(vocab_s, fs)
            bow_g = vocab.quantize(vocab_g, fg)
        with timer.stage("detect"):
            detector.process(fs.frame_id, bow_s, bow_g)
    return detector.detections


def _cmd_extract(args) -> int:
    cfg = load_config(
        args.config,
        dedup_T=args.dedup_T, dedup_N=args.dedup_N, dedup_s_min=args.dedup_s_min,
        sampler_count=args.sampler_count, sampler_seed=args.sampler_seed,
    )
    manifest = ingest.read_sequence(args.input, layout=args.layout)
    timer = StageTimer()
    emitted = extract_sequence(
        manifest, args.out, cfg,
        backend=args.backend, every_third=args.every_third,
        workers=args.workers, timer=timer,
    )
    (Path(args.out) / "config.json").write_text(cfg.json() + "\n", encoding="utf-8")
    print(f"extracted {len(emitted)} of {len(manifest)} frames into {args.out}")
    if args.timings:
        for line in timer.report_lines():
            print(line)
    return 0


def _cmd_train_vocab(args) -> int:
    cfg = load_config(args.config, vocab_k=args.k, vocab_L=args.L, vocab_seed=args.seed)
    family = FeatureFamily.SALIENT if args.family == "salient" else FeatureFamily.GEOMETRIC
    frames = load_feature_dir(args.features, family)
    if not frames:
        raise ValueError(f"no {family.name.lower()} feature files in {args.features}")
    voc = vocab.train(frames, k=cfg.vocab_k, L=cfg.vocab_L, seed=cfg.vocab_seed)
    vocab.save_vocabulary(voc, args.out)
    print(f"trained {family.name.lower()} vocabulary: {voc.word_count} words "
          f"(k={cfg.vocab_k}, L={cfg.vocab_L}) -> {args.out}")
    return 0


def _cmd_detect(args) -> int:
    cfg = load_config(
        args.config,
        fusion_w_s=args.w_s, fusion_w_g=args.w_g,
        fusion_s_th=args.s_th, fusion_min_frame_gap=args.min_frame_gap,
    )
    vocab_s = vocab.load_vocabulary(args.vocab_s)
    vocab_g = vocab.load_vocabulary(args.vocab_g)
    timer = StageTimer()
    detections = detect_loops(args.features, vocab_s, vocab_g, cfg, timer=timer)
    header = [f"config: {cfg.json()}"]
    if args.timings:
        header += timer.report_lines()
    loopdet.write_detections(args.out, detections, header_lines=header)
    print(f"{len(detections)} loop detections -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(
        args.config,
        eval_r=args.r, eval_min_gap=args.min_gap, eval_tol=args.tol,
    )
    detections = loopdet.read_detections(args.detections)
    if args.labels is not None:
        labels = evalkit.read_loop_labels(args.labels)
    else:
        gt = evalkit.read_trajectory(args.gt)
        labels = evalkit.derive_loop_labels(gt, cfg.eval_r, cfg.eval_min_gap)
    counts, precision, recall = evalkit.precision_recall(detections, labels, cfg.eval_tol)
    report = evalkit.format_metrics({
        "detections": len(detections),
        "labels": len(labels.pairs),
        "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
        "precision": precision, "recall": recall,
    })
    body = f"# config: {cfg.json()}\n{report}\n"
    if args.out:
        Path(args.out).write_text(body, encoding="utf-8")
    print(body, end="")
    return 0


def _cmd_ate(args) -> int:
    cfg = load_config(args.config, eval_align=args.align)
    pred = evalkit.read_trajectory(args.pred)
    gt = evalkit.read_trajectory(args.gt)
    value = evalkit.ate_rmse(pred, gt, align=cfg.eval_align == "sim3")
    print(f"# config: {cfg.json()}")
    print(evalkit.format_metrics({"ate_rmse_m": value}))
    return 0


def _cmd_simhist(args) -> int:
    cfg = load_config(args.config)
    geo = load_feature_dir(args.features, FeatureFamily.GEOMETRIC)
    sal = {f.frame_id: f for f in load_feature_dir(args.features, FeatureFamily.SALIENT)}
    total = None
    skipped = 0
    pairs = 0
    for g in geo:
        s = sal.get(g.frame_id)
        if s is None or len(g) == 0 or len(s) == 0:
            continue
        hist = evalkit.feature_similarity_histogram(g, s, bins=args.bins)
        total = hist.counts if total is None else total + hist.counts
        skipped += hist.skipped
        pairs += 1
    if total is None:
        raise ValueError(f"no frame in {args.features} has both families nonempty")
    hist = evalkit.SimilarityHistogram(
        bin_edges=np.linspace(-1.0, 1.0, args.bins + 1), counts=total, skipped=skipped,
    )
    norm = hist.normalized()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"# config: {cfg.json()}\n")
        fh.write(f"# frames={pairs} skipped_descriptors={skipped}\n")
        fh.write("bin_center,count,normalized\n")
        for center, count, nv in zip(hist.bin_centers, hist.counts, norm):
            fh.write(f"{float(center)!r},{int(count)},{float(nv)!r}\n")
    print(f"similarity histogram over {pairs} frames -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    document = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    if not isinstance(document, dict):
        raise ValueError(f"{args.spec}: synth spec must be a JSON object")
    known = {f.name for f in dataclasses.fields(ingest.SynthSpec)}
    unknown = set(document) - known
    if unknown:
        raise ValueError(f"{args.spec}: unknown synth spec keys {sorted(unknown)}")
    if "loops" in document:
        document["loops"] = tuple(tuple(pair) for pair in document["loops"])
    spec = ingest.SynthSpec(**document)
    manifest = ingest.synth_loop_sequence(spec, args.out)
    labels = evalkit.read_loop_labels(Path(args.out) / "labels.tsv")
    print(f"synthesized {len(manifest)} frames, {len(labels.pairs)} labeled loop pairs -> {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgi",
        description="Loop-closure detection pipeline: feature extraction, "
                    "vocabulary training, detection, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="JSON config document (flags win)")

    p = sub.add_parser("extract", help="compute per-frame features and heatmaps")
    add_config(p)
    p.add_argument("--input", required=True, help="sequence root directory")
    p.add_argument("--layout", default="flat", choices=("flat", "kitti_like", "euroc_like"))
    p.add_argument("--backend", default="fallback", choices=("files", "fallback"),
                   help="'files' reads precomputed features/heatmaps from the input; "
                        "'fallback' computes classical substitutes")
    p.add_argument("--out", required=True)
    p.add_argument("--every-third", action="store_true",
                   help="emit only frames 0,3,6,... with triple-frame merged geometry")
    p.add_argument("--workers", type=int, default=1, help="frame-parallel worker threads")
    p.add_argument("--timings", action="store_true", help="print per-stage mean milliseconds")
    p.add_argument("--dedup-T", dest="dedup_T", type=float, default=None)
    p.add_argument("--dedup-N", dest="dedup_N", type=int, default=None)
    p.add_argument("--dedup-s-min", dest="dedup_s_min", type=float, default=None)
    p.add_argument("--sampler-count", dest="sampler_count", type=int, default=None)
    p.add_argument("--sampler-seed", dest="sampler_seed", type=int, default=None)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train-vocab", help="train a vocabulary tree from feature files")
    add_config(p)
    p.add_argument("--features", required=True)
    p.add_argument("--family", required=True, choices=("geometric", "salient"))
    p.add_argument("--k", type=int, default=None, help="branching factor")
    p.add_argument("--L", type=int, default=None, help="tree depth")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_vocab)

    p = sub.add_parser("detect", help="run loop detection over a feature directory")
    add_config(p)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab-s", dest="vocab_s", required=True)
    p.add_argument("--vocab-g", dest="vocab_g", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timings", action="store_true",
                   help="append per-stage mean milliseconds to the output header")
    p.add_argument("--w-s", dest="w_s", type=float, default=None)
    p.add_argument("--w-g", dest="w_g", type=float, default=None)
    p.add_argument("--s-th", dest="s_th", type=float, default=None)
    p.add_argument("--min-frame-gap", dest="min_frame_gap", type=int, default=None)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="precision/recall of detections against loop labels")
    add_config(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", default=None, help="ground-truth pose file to derive labels from")
    p.add_argument("--labels", default=None, help="explicit labels file (overrides --gt)")
    p.add_argument("--r", type=float, default=None, help="label radius in meters")
    p.add_argument("--min-gap", dest="min_gap", type=int, default=None)
    p.add_argument("--tol", type=int, default=None, help="endpoint match tolerance in frames")
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ate", help="absolute trajectory error (RMSE) in meters")
    add_config(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align", default=None, choices=("sim3", "none"))
    p.set_defaults(func=_cmd_ate)

    p = sub.add_parser("simhist", help="cross-family descriptor similarity histogram CSV")
    add_config(p)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=100)
    p.set_defaults(func=_cmd_simhist)

    p = sub.add_parser("synth", help="render a synthetic loop sequence")
    p.add_argument("--spec", required=True, help="JSON synth parameters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.labels is None and args.gt is None:
        parser.error("eval needs --gt or --labels")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
