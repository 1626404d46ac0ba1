import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';

import { writePgm } from '../src/format';
import {
  buildKeypointModel,
  buildSaliencyModel,
  mulberry32,
  saveCheckpoint,
  seedWeights,
} from '../src/model';

export function tmpDir(prefix: string): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), prefix));
}

/** Rectangle-textured grayscale test image; deterministic per seed. */
export function texturedImage(w: number, h: number, seed: number): Float32Array {
  const rand = mulberry32(seed);
  const px = new Float32Array(w * h).fill(0.35);
  const n = Math.max(30, Math.floor((w * h) / 300));
  for (let r = 0; r < n; r++) {
    const rw = 3 + Math.floor(rand() * 8);
    const rh = 3 + Math.floor(rand() * 8);
    const x0 = Math.floor(rand() * (w - rw));
    const y0 = Math.floor(rand() * (h - rh));
    const v = 0.1 + 0.8 * rand();
    for (let y = y0; y < y0 + rh; y++) {
      for (let x = x0; x < x0 + rw; x++) px[y * w + x] = v;
    }
  }
  return px;
}

export function frameName(id: number): string {
  return `${String(id).padStart(6, '0')}.pgm`;
}

/** Write n 8-bit frames into dir; frame `blankId` (if given) is constant. */
export function makeImageDir(
  dir: string,
  n: number,
  opts: { w?: number; h?: number; seed?: number; blankId?: number } = {},
): void {
  const w = opts.w ?? 64;
  const h = opts.h ?? 64;
  const seed = opts.seed ?? 100;
  for (let i = 0; i < n; i++) {
    const pixels =
      i === opts.blankId ? new Float32Array(w * h).fill(0.5) : texturedImage(w, h, seed + i);
    writePgm(path.join(dir, frameName(i)), pixels, w, h, 255);
  }
}

/** Seeded demo checkpoints under dir/keypoint and dir/saliency. */
export async function makeCheckpoints(dir: string, seed = 7): Promise<{
  keypointModelDir: string;
  saliencyModelDir: string;
}> {
  const keypointModelDir = path.join(dir, 'keypoint');
  const saliencyModelDir = path.join(dir, 'saliency');
  const km = buildKeypointModel();
  const sm = buildSaliencyModel();
  try {
    seedWeights(km, seed);
    seedWeights(sm, seed + 1);
    await saveCheckpoint(km, keypointModelDir);
    await saveCheckpoint(sm, saliencyModelDir);
  } finally {
    km.dispose();
    sm.dispose();
  }
  return { keypointModelDir, saliencyModelDir };
}
