/**
 * Network plumbing: checkpoint load/save in the standard layers-model layout
 * (model.json + weights.bin), output-shape validation, and builders for the
 * two demo architectures. The keypoint network follows the usual
 * detector/descriptor split: a shared strided encoder feeding a 65-channel
 * cell head (8x8 positions plus a "no keypoint" dustbin, decoded with a
 * channel softmax and depth-to-space) and a 256-channel descriptor head. The
 * saliency network is a small hourglass ending in a sigmoid map.
 */

import * as tf from '@tensorflow/tfjs';
import * as fs from 'fs';
import * as path from 'path';

export class ExportError extends Error {}
export class CheckpointLoadError extends ExportError {}
export class DimensionMismatchError extends ExportError {}

export const KEYPOINT_CELLS = 65;
export const DESCRIPTOR_CHANNELS = 256;
export const CELL_SIZE = 8;

export function buildKeypointModel(): tf.LayersModel {
  const input = tf.input({ shape: [null, null, 1], name: 'image' });
  let x = tf.layers
    .conv2d({ filters: 8, kernelSize: 3, padding: 'same', activation: 'relu', name: 'enc1' })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool1' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 16, kernelSize: 3, padding: 'same', activation: 'relu', name: 'enc2' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool2' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 16, kernelSize: 3, padding: 'same', activation: 'relu', name: 'enc3' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool3' }).apply(x) as tf.SymbolicTensor;

  const det = tf.layers
    .conv2d({ filters: 32, kernelSize: 3, padding: 'same', activation: 'relu', name: 'det1' })
    .apply(x) as tf.SymbolicTensor;
  const logits = tf.layers
    .conv2d({ filters: KEYPOINT_CELLS, kernelSize: 1, name: 'det_logits' })
    .apply(det) as tf.SymbolicTensor;

  const desc = tf.layers
    .conv2d({ filters: 32, kernelSize: 3, padding: 'same', activation: 'relu', name: 'desc1' })
    .apply(x) as tf.SymbolicTensor;
  const descRaw = tf.layers
    .conv2d({ filters: DESCRIPTOR_CHANNELS, kernelSize: 1, name: 'desc_raw' })
    .apply(desc) as tf.SymbolicTensor;

  return tf.model({ inputs: input, outputs: [logits, descRaw], name: 'keypoint_net' });
}

export function buildSaliencyModel(): tf.LayersModel {
  const input = tf.input({ shape: [null, null, 1], name: 'image' });
  let x = tf.layers
    .conv2d({ filters: 8, kernelSize: 3, padding: 'same', activation: 'relu', name: 'down1' })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool1' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 16, kernelSize: 3, padding: 'same', activation: 'relu', name: 'down2' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2, name: 'pool2' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 16, kernelSize: 3, padding: 'same', activation: 'relu', name: 'mid' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.upSampling2d({ size: [2, 2], name: 'up1' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 8, kernelSize: 3, padding: 'same', activation: 'relu', name: 'up1conv' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.upSampling2d({ size: [2, 2], name: 'up2' }).apply(x) as tf.SymbolicTensor;
  const out = tf.layers
    .conv2d({ filters: 1, kernelSize: 1, activation: 'sigmoid', name: 'sal_out' })
    .apply(x) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: out, name: 'saliency_net' });
}

/** Deterministic 32-bit PRNG (mulberry32); good enough for weight fixtures. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussian(rand: () => number): () => number {
  let spare: number | null = null;
  return () => {
    if (spare !== null) {
      const v = spare;
      spare = null;
      return v;
    }
    let u = 0;
    let v = 0;
    while (u === 0) u = rand();
    v = rand();
    const mag = Math.sqrt(-2 * Math.log(u));
    spare = mag * Math.sin(2 * Math.PI * v);
    return mag * Math.cos(2 * Math.PI * v);
  };
}

/**
 * Overwrite a model's weights from a seeded PRNG: He-scaled kernels, zero
 * biases. The keypoint cell head gets a positive dustbin bias so a
 * featureless input keeps every cell below any sane confidence threshold,
 * mirroring the prior a trained detector acquires.
 */
export function seedWeights(model: tf.LayersModel, seed: number, dustbinBias = 3.0): void {
  const normal = gaussian(mulberry32(seed));
  for (const layer of model.layers) {
    const weights = layer.getWeights();
    if (weights.length === 0) continue;
    const replaced = weights.map((w, wi) => {
      const shape = w.shape;
      const n = shape.reduce((a, b) => a * b, 1);
      const values = new Float32Array(n);
      if (wi === 0 && shape.length === 4) {
        const fanIn = shape[0] * shape[1] * shape[2];
        const std = Math.sqrt(2 / fanIn);
        for (let i = 0; i < n; i++) values[i] = std * normal();
      } else if (layer.name === 'det_logits' && wi === 1) {
        values[n - 1] = dustbinBias;
      }
      return tf.tensor(values, shape as number[]);
    });
    layer.setWeights(replaced);
    replaced.forEach((t) => t.dispose());
  }
}

interface CheckpointJson {
  modelTopology: {};
  weightsManifest: Array<{ paths: string[]; weights: tf.io.WeightsManifestEntry[] }>;
}

/** Persist a model as model.json + weights.bin under dir. */
export async function saveCheckpoint(model: tf.LayersModel, dir: string): Promise<void> {
  fs.mkdirSync(dir, { recursive: true });
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const weightData = artifacts.weightData as ArrayBuffer;
      const doc: CheckpointJson = {
        modelTopology: artifacts.modelTopology as {},
        weightsManifest: [
          { paths: ['weights.bin'], weights: artifacts.weightSpecs ?? [] },
        ],
      };
      fs.writeFileSync(path.join(dir, 'model.json'), JSON.stringify(doc));
      fs.writeFileSync(path.join(dir, 'weights.bin'), Buffer.from(weightData));
      return {
        modelArtifactsInfo: {
          dateSaved: new Date(),
          modelTopologyType: 'JSON',
        },
      };
    }),
  );
}

export function checkpointExists(dir: string): boolean {
  return (
    fs.existsSync(path.join(dir, 'model.json')) &&
    fs.existsSync(path.join(dir, 'weights.bin'))
  );
}

export async function loadCheckpoint(dir: string): Promise<tf.LayersModel> {
  let doc: CheckpointJson;
  let weights: Buffer;
  try {
    doc = JSON.parse(fs.readFileSync(path.join(dir, 'model.json'), 'utf8'));
    weights = fs.readFileSync(path.join(dir, 'weights.bin'));
  } catch (e) {
    throw new CheckpointLoadError(`cannot read checkpoint at ${dir}: ${(e as Error).message}`);
  }
  if (!doc.modelTopology || !Array.isArray(doc.weightsManifest)) {
    throw new CheckpointLoadError(`checkpoint at ${dir} is missing topology or weights manifest`);
  }
  try {
    return await tf.loadLayersModel(
      tf.io.fromMemory({
        modelTopology: doc.modelTopology,
        weightSpecs: doc.weightsManifest.flatMap((g) => g.weights),
        weightData: weights.buffer.slice(
          weights.byteOffset,
          weights.byteOffset + weights.byteLength,
        ),
      }),
    );
  } catch (e) {
    throw new CheckpointLoadError(`checkpoint at ${dir} failed to load: ${(e as Error).message}`);
  }
}

function lastDim(shape: Array<number | null>): number | null {
  return shape.length ? shape[shape.length - 1] : null;
}

/** The exporter's contract on a keypoint checkpoint: two heads, 65 cell
 * channels and 256 descriptor channels. */
export function validateKeypointModel(model: tf.LayersModel): void {
  if (model.outputs.length !== 2) {
    throw new DimensionMismatchError(
      `keypoint checkpoint must expose 2 outputs (cells, descriptors), got ${model.outputs.length}`,
    );
  }
  const cells = lastDim(model.outputs[0].shape);
  const desc = lastDim(model.outputs[1].shape);
  if (cells !== KEYPOINT_CELLS) {
    throw new DimensionMismatchError(`cell head has ${cells} channels, expected ${KEYPOINT_CELLS}`);
  }
  if (desc !== DESCRIPTOR_CHANNELS) {
    throw new DimensionMismatchError(
      `descriptor head has ${desc} channels, expected ${DESCRIPTOR_CHANNELS}`,
    );
  }
}

export function validateSaliencyModel(model: tf.LayersModel): void {
  if (model.outputs.length !== 1) {
    throw new DimensionMismatchError(
      `saliency checkpoint must expose 1 output, got ${model.outputs.length}`,
    );
  }
  const ch = lastDim(model.outputs[0].shape);
  if (ch !== 1) {
    throw new DimensionMismatchError(`saliency head has ${ch} channels, expected 1`);
  }
}
