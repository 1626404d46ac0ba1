#!/usr/bin/env node
/**
 * hgi-export: run checkpoints over an image directory and emit the feature
 * files and heatmaps the loop-closure pipeline consumes.
 *
 *   hgi-export export --images seq/ --out seq/ \
 *       --keypoint-model ckpt/keypoint --saliency-model ckpt/saliency
 *   hgi-export make-demo-checkpoints --out ckpt/ --seed 7
 */

import { parseArgs } from 'node:util';

import {
  DEFAULT_MAX_KEYPOINTS,
  DEFAULT_THRESHOLD,
  createManifest,
  exportGeometric,
  exportSaliency,
} from './export';
import {
  buildKeypointModel,
  buildSaliencyModel,
  ExportError,
  saveCheckpoint,
  seedWeights,
} from './model';

function usage(): string {
  return [
    'usage: hgi-export <command> [options]',
    '',
    'commands:',
    '  export                  run both checkpoints over an image directory',
    '    --images <dir>          input directory of .pgm frames (required)',
    '    --out <dir>             output root; writes features/ and heatmaps/ (required)',
    '    --keypoint-model <dir>  keypoint checkpoint directory (required)',
    '    --saliency-model <dir>  saliency checkpoint directory (required)',
    '    --device <name>         tfjs backend (default cpu)',
    '    --batch-size <n>        frames per inference batch (default 4)',
    `    --threshold <t>         keypoint confidence cutoff (default ${DEFAULT_THRESHOLD})`,
    `    --max-keypoints <n>     per-frame keypoint cap (default ${DEFAULT_MAX_KEYPOINTS})`,
    '    --only <family>         geometric | saliency (default: both)',
    '  make-demo-checkpoints   write random-weight demo checkpoints (not trained)',
    '    --out <dir>             writes <dir>/keypoint and <dir>/saliency (required)',
    '    --seed <n>              weight seed (default 7)',
  ].join('\n');
}

function required(values: Record<string, unknown>, name: string): string {
  const v = values[name];
  if (typeof v !== 'string' || v.length === 0) {
    throw new ExportError(`--${name} is required`);
  }
  return v;
}

function integer(values: Record<string, unknown>, name: string, fallback: number): number {
  const v = values[name];
  if (v === undefined) return fallback;
  const n = Number(v);
  if (!Number.isInteger(n)) {
    throw new ExportError(`--${name} must be an integer, got ${v}`);
  }
  return n;
}

async function cmdExport(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      images: { type: 'string' },
      out: { type: 'string' },
      'keypoint-model': { type: 'string' },
      'saliency-model': { type: 'string' },
      device: { type: 'string' },
      'batch-size': { type: 'string' },
      threshold: { type: 'string' },
      'max-keypoints': { type: 'string' },
      only: { type: 'string' },
    },
  });
  const only = values.only;
  if (only !== undefined && only !== 'geometric' && only !== 'saliency') {
    throw new ExportError(`--only must be 'geometric' or 'saliency', got ${only}`);
  }
  const manifest = createManifest({
    keypointModelDir: required(values, 'keypoint-model'),
    saliencyModelDir: required(values, 'saliency-model'),
    inputDir: required(values, 'images'),
    outputDir: required(values, 'out'),
    device: values.device,
    batchSize: integer(values, 'batch-size', 4),
  });
  const threshold = values.threshold === undefined ? undefined : Number(values.threshold);
  if (threshold !== undefined && !Number.isFinite(threshold)) {
    throw new ExportError(`--threshold must be a number, got ${values.threshold}`);
  }
  if (only !== 'saliency') {
    const results = await exportGeometric(manifest, {
      threshold,
      maxKeypoints: integer(values, 'max-keypoints', DEFAULT_MAX_KEYPOINTS),
    });
    const total = results.reduce((a, r) => a + r.keypointCount, 0);
    console.log(
      `geometric: ${results.length} frames, ${total} keypoints -> ${manifest.outputDir}/features`,
    );
  }
  if (only !== 'geometric') {
    const results = await exportSaliency(manifest);
    console.log(`saliency: ${results.length} heatmaps -> ${manifest.outputDir}/heatmaps`);
  }
  return 0;
}

async function cmdMakeDemoCheckpoints(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      out: { type: 'string' },
      seed: { type: 'string' },
    },
  });
  const out = required(values, 'out');
  const seed = integer(values, 'seed', 7);
  const keypoint = buildKeypointModel();
  seedWeights(keypoint, seed);
  await saveCheckpoint(keypoint, `${out}/keypoint`);
  keypoint.dispose();
  const saliency = buildSaliencyModel();
  seedWeights(saliency, seed + 1);
  await saveCheckpoint(saliency, `${out}/saliency`);
  saliency.dispose();
  console.log(`demo checkpoints (seed ${seed}) -> ${out}/keypoint, ${out}/saliency`);
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    if (command === 'export') return await cmdExport(rest);
    if (command === 'make-demo-checkpoints') return await cmdMakeDemoCheckpoints(rest);
    console.error(usage());
    return command === undefined || command === '--help' || command === '-h' ? 0 : 1;
  } catch (e) {
    console.error(`error: ${(e as Error).message}`);
    return 1;
  }
}

if (require.main === module) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
