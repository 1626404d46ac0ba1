/**
 * Offline export: run a keypoint checkpoint and a saliency checkpoint over a
 * directory of PGM images and write, per frame, a geometric feature file
 * (f32 x/y keypoints plus L2-normalized 256-float descriptors) under
 * out/features and a 16-bit saliency heatmap under out/heatmaps, using the
 * exact artifact names the loop-closure pipeline looks up.
 */

import * as tf from '@tensorflow/tfjs';
import * as fs from 'fs';
import * as path from 'path';

import {
  GEOM_DESCRIPTOR_LENGTH,
  geometricFeatureName,
  heatmapName,
  readPgm,
  writeGeometricFrame,
  writePgm,
} from './format';
import {
  CELL_SIZE,
  DESCRIPTOR_CHANNELS,
  ExportError,
  checkpointExists,
  loadCheckpoint,
  validateKeypointModel,
  validateSaliencyModel,
} from './model';

export class ManifestError extends ExportError {}

export interface ExportManifest {
  keypointModelDir: string;
  saliencyModelDir: string;
  inputDir: string;
  outputDir: string;
  /** tfjs backend name; plain Node supports 'cpu' */
  device: string;
  batchSize: number;
}

export interface ExportOptions {
  /** keep keypoints whose cell score exceeds this (strict) */
  threshold?: number;
  /** keep at most this many keypoints per frame, strongest first */
  maxKeypoints?: number;
}

export const DEFAULT_THRESHOLD = 0.015;
export const DEFAULT_MAX_KEYPOINTS = 1000;

export interface FrameEntry {
  frameId: number;
  path: string;
}

/** Validate the manifest invariants up front: checkpoints present, input
 * images present, output directory writable. */
export function createManifest(opts: {
  keypointModelDir: string;
  saliencyModelDir: string;
  inputDir: string;
  outputDir: string;
  device?: string;
  batchSize?: number;
}): ExportManifest {
  const device = opts.device ?? 'cpu';
  const batchSize = opts.batchSize ?? 4;
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new ManifestError(`batch size must be a positive integer, got ${batchSize}`);
  }
  for (const dir of [opts.keypointModelDir, opts.saliencyModelDir]) {
    if (!checkpointExists(dir)) {
      throw new ManifestError(`no checkpoint (model.json + weights.bin) at ${dir}`);
    }
  }
  if (listFrames(opts.inputDir).length === 0) {
    throw new ManifestError(`no .pgm images in ${opts.inputDir}`);
  }
  try {
    fs.mkdirSync(opts.outputDir, { recursive: true });
    const probe = path.join(opts.outputDir, '.write-probe');
    fs.writeFileSync(probe, '');
    fs.unlinkSync(probe);
  } catch (e) {
    throw new ManifestError(
      `output directory ${opts.outputDir} is not writable: ${(e as Error).message}`,
    );
  }
  return {
    keypointModelDir: opts.keypointModelDir,
    saliencyModelDir: opts.saliencyModelDir,
    inputDir: opts.inputDir,
    outputDir: opts.outputDir,
    device,
    batchSize,
  };
}

/** Enumerate input frames: .pgm files in name order. All-numeric stems name
 * the frame ids; any other naming falls back to positional ids. */
export function listFrames(inputDir: string): FrameEntry[] {
  let names: string[];
  try {
    names = fs.readdirSync(inputDir).filter((n) => n.toLowerCase().endsWith('.pgm'));
  } catch (e) {
    throw new ManifestError(`cannot list ${inputDir}: ${(e as Error).message}`);
  }
  names.sort();
  const numeric = names.length > 0 && names.every((n) => /^\d+$/.test(path.parse(n).name));
  const entries = names.map((n, i) => ({
    frameId: numeric ? parseInt(path.parse(n).name, 10) : i,
    path: path.join(inputDir, n),
  }));
  const seen = new Set<number>();
  for (const e of entries) {
    if (seen.has(e.frameId)) {
      throw new ManifestError(`duplicate frame id ${e.frameId} in ${inputDir}`);
    }
    seen.add(e.frameId);
  }
  return entries;
}

async function selectBackend(device: string): Promise<void> {
  const ok = await tf.setBackend(device);
  if (!ok) {
    throw new ExportError(`backend '${device}' is not available`);
  }
  await tf.ready();
}

interface LoadedFrame extends FrameEntry {
  width: number;
  height: number;
  pixels: Float32Array;
}

function loadFrame(entry: FrameEntry): LoadedFrame {
  const img = readPgm(entry.path);
  return { ...entry, width: img.width, height: img.height, pixels: img.pixels };
}

/** Chunk frames into batches of equal spatial size, preserving order. */
function batchFrames(frames: LoadedFrame[], batchSize: number): LoadedFrame[][] {
  const batches: LoadedFrame[][] = [];
  let current: LoadedFrame[] = [];
  for (const f of frames) {
    const fits =
      current.length > 0 &&
      current.length < batchSize &&
      current[0].width === f.width &&
      current[0].height === f.height;
    if (fits) {
      current.push(f);
    } else {
      if (current.length) batches.push(current);
      current = [f];
    }
  }
  if (current.length) batches.push(current);
  return batches;
}

function padTo(v: number, multiple: number): number {
  return Math.ceil(v / multiple) * multiple;
}

/** Stack a batch into [B, Hp, Wp, 1], standardized to zero mean per frame and
 * zero padded to a cell multiple. Mean subtraction makes the padding seamless
 * and guarantees a featureless (constant) image reaches the network as exact
 * zeros, so only the learned bias response remains. */
function batchTensor(batch: LoadedFrame[]): { input: tf.Tensor4D; hp: number; wp: number } {
  const h = batch[0].height;
  const w = batch[0].width;
  const hp = padTo(h, CELL_SIZE);
  const wp = padTo(w, CELL_SIZE);
  const data = new Float32Array(batch.length * hp * wp);
  batch.forEach((f, b) => {
    let mean = 0;
    for (const v of f.pixels) mean += v;
    mean /= f.pixels.length;
    for (let y = 0; y < h; y++) {
      const row = (b * hp + y) * wp;
      for (let x = 0; x < w; x++) {
        data[row + x] = f.pixels[y * w + x] - mean;
      }
    }
  });
  return { input: tf.tensor4d(data, [batch.length, hp, wp, 1]), hp, wp };
}

export interface GeometricResult {
  frameId: number;
  keypointCount: number;
  path: string;
}

export async function exportGeometric(
  manifest: ExportManifest,
  options: ExportOptions = {},
): Promise<GeometricResult[]> {
  const threshold = options.threshold ?? DEFAULT_THRESHOLD;
  const maxKeypoints = options.maxKeypoints ?? DEFAULT_MAX_KEYPOINTS;
  if (!(threshold >= 0) || !Number.isFinite(threshold)) {
    throw new ExportError(`threshold must be a finite number >= 0, got ${threshold}`);
  }
  if (!Number.isInteger(maxKeypoints) || maxKeypoints < 0) {
    throw new ExportError(`max keypoints must be an integer >= 0, got ${maxKeypoints}`);
  }
  await selectBackend(manifest.device);
  const model = await loadCheckpoint(manifest.keypointModelDir);
  try {
    validateKeypointModel(model);
    const frames = listFrames(manifest.inputDir).map(loadFrame);
    const outDir = path.join(manifest.outputDir, 'features');
    const results: GeometricResult[] = [];
    for (const batch of batchFrames(frames, manifest.batchSize)) {
      const h = batch[0].height;
      const w = batch[0].width;
      const [scores, descriptors] = tf.tidy(() => {
        const { input, hp, wp } = batchTensor(batch);
        const [logits, descRaw] = model.predict(input) as [tf.Tensor4D, tf.Tensor4D];
        const soft = tf.softmax(logits, -1);
        const cells = soft.slice(
          [0, 0, 0, 0],
          [batch.length, hp / CELL_SIZE, wp / CELL_SIZE, CELL_SIZE * CELL_SIZE],
        );
        const full = tf.depthToSpace(cells, CELL_SIZE);
        const descMap = tf.image.resizeBilinear(descRaw, [hp, wp]);
        return [
          full.slice([0, 0, 0, 0], [batch.length, h, w, 1]),
          descMap.slice([0, 0, 0, 0], [batch.length, h, w, DESCRIPTOR_CHANNELS]),
        ];
      });
      const scoreData = scores.dataSync() as Float32Array;
      const descData = descriptors.dataSync() as Float32Array;
      scores.dispose();
      descriptors.dispose();

      batch.forEach((frame, b) => {
        const base = b * h * w;
        let kept: number[] = [];
        for (let i = 0; i < h * w; i++) {
          if (scoreData[base + i] > threshold) kept.push(i);
        }
        if (kept.length > maxKeypoints) {
          kept.sort((a, c) => scoreData[base + c] - scoreData[base + a] || a - c);
          kept = kept.slice(0, maxKeypoints);
          kept.sort((a, c) => a - c);
        }
        const keypoints = new Float32Array(2 * kept.length);
        const desc = new Float32Array(kept.length * GEOM_DESCRIPTOR_LENGTH);
        kept.forEach((pix, k) => {
          keypoints[2 * k] = pix % w;
          keypoints[2 * k + 1] = Math.floor(pix / w);
          const src = (base + pix) * DESCRIPTOR_CHANNELS;
          let norm = 0;
          for (let c = 0; c < DESCRIPTOR_CHANNELS; c++) {
            const v = descData[src + c];
            norm += v * v;
          }
          norm = Math.sqrt(norm);
          const inv = norm > 1e-12 ? 1 / norm : 0;
          for (let c = 0; c < DESCRIPTOR_CHANNELS; c++) {
            desc[k * GEOM_DESCRIPTOR_LENGTH + c] = Math.fround(descData[src + c] * inv);
          }
        });
        const filePath = path.join(outDir, geometricFeatureName(frame.frameId));
        writeGeometricFrame(filePath, {
          frameId: frame.frameId,
          keypoints,
          descriptors: desc,
          descriptorLength: GEOM_DESCRIPTOR_LENGTH,
        });
        results.push({ frameId: frame.frameId, keypointCount: kept.length, path: filePath });
      });
    }
    return results;
  } finally {
    model.dispose();
  }
}

export interface SaliencyResult {
  frameId: number;
  path: string;
}

export async function exportSaliency(manifest: ExportManifest): Promise<SaliencyResult[]> {
  await selectBackend(manifest.device);
  const model = await loadCheckpoint(manifest.saliencyModelDir);
  try {
    validateSaliencyModel(model);
    const frames = listFrames(manifest.inputDir).map(loadFrame);
    const outDir = path.join(manifest.outputDir, 'heatmaps');
    const results: SaliencyResult[] = [];
    for (const batch of batchFrames(frames, manifest.batchSize)) {
      const h = batch[0].height;
      const w = batch[0].width;
      const heat = tf.tidy(() => {
        const { input } = batchTensor(batch);
        const out = model.predict(input) as tf.Tensor4D;
        return out.slice([0, 0, 0, 0], [batch.length, h, w, 1]);
      });
      const heatData = heat.dataSync() as Float32Array;
      heat.dispose();

      batch.forEach((frame, b) => {
        const values = heatData.subarray(b * h * w, (b + 1) * h * w);
        let lo = Infinity;
        let hi = -Infinity;
        for (const v of values) {
          if (v < lo) lo = v;
          if (v > hi) hi = v;
        }
        // Min-max per frame; a constant map normalizes to zeros.
        const range = Math.max(hi - lo, 1e-12);
        const normalized = new Float32Array(values.length);
        for (let i = 0; i < values.length; i++) {
          normalized[i] = (values[i] - lo) / range;
        }
        const filePath = path.join(outDir, heatmapName(frame.frameId));
        writePgm(filePath, normalized, w, h);
        results.push({ frameId: frame.frameId, path: filePath });
      });
    }
    return results;
  } finally {
    model.dispose();
  }
}
