/**
 * Byte-exact writers for the artifacts the loop-closure pipeline ingests:
 * feature files (.hgif) and 16-bit binary PGM heatmaps. Layouts mirror the
 * consumer's parsers field for field; every multi-byte integer in a feature
 * file is little-endian, PGM rasters above 8 bit are big-endian per the PNM
 * convention.
 */

import * as fs from 'fs';
import * as path from 'path';

export const HGIF_MAGIC = 'HGIF';
export const HGIF_VERSION = 1;
export const HGIF_HEADER_SIZE = 26;

export const FAMILY_GEOMETRIC = 0;
export const FAMILY_SALIENT = 1;
export const ELEM_F32 = 0;
export const ELEM_U8 = 1;

export const GEOM_DESCRIPTOR_LENGTH = 256;

export interface GeometricFrame {
  frameId: number;
  /** interleaved (x, y) pairs, length 2 * count */
  keypoints: Float32Array;
  /** row-major count * descriptorLength */
  descriptors: Float32Array;
  descriptorLength: number;
}

/** Serialize one frame's geometric features (family 0, f32 descriptors). */
export function encodeGeometricFrame(frame: GeometricFrame): Buffer {
  const { frameId, keypoints, descriptors, descriptorLength } = frame;
  if (!Number.isInteger(frameId) || frameId < 0) {
    throw new Error(`frame id must be a non-negative integer, got ${frameId}`);
  }
  if (keypoints.length % 2 !== 0) {
    throw new Error('keypoints must hold interleaved (x, y) pairs');
  }
  const count = keypoints.length / 2;
  if (descriptors.length !== count * descriptorLength) {
    throw new Error(
      `descriptor buffer holds ${descriptors.length} values, ` +
        `expected ${count} x ${descriptorLength}`,
    );
  }
  const body = 8 * count + 4 * count * descriptorLength;
  const buf = Buffer.alloc(HGIF_HEADER_SIZE + body);
  buf.write(HGIF_MAGIC, 0, 'ascii');
  buf.writeUInt32LE(HGIF_VERSION, 4);
  buf.writeUInt8(FAMILY_GEOMETRIC, 8);
  buf.writeBigUInt64LE(BigInt(frameId), 9);
  buf.writeUInt32LE(count, 17);
  buf.writeUInt32LE(descriptorLength, 21);
  buf.writeUInt8(ELEM_F32, 25);
  let off = HGIF_HEADER_SIZE;
  for (let i = 0; i < keypoints.length; i++) {
    buf.writeFloatLE(keypoints[i], off);
    off += 4;
  }
  for (let i = 0; i < descriptors.length; i++) {
    buf.writeFloatLE(descriptors[i], off);
    off += 4;
  }
  return buf;
}

export function writeGeometricFrame(filePath: string, frame: GeometricFrame): void {
  fs.mkdirSync(path.dirname(filePath), { recursive: true });
  fs.writeFileSync(filePath, encodeGeometricFrame(frame));
}

/** Minimal reader used by the round-trip tests; the pipeline's own parser is
 * the authority on rejection behavior. */
export function decodeGeometricFrame(buf: Buffer): GeometricFrame {
  if (buf.length < HGIF_HEADER_SIZE) {
    throw new Error('feature file shorter than its header');
  }
  if (buf.toString('ascii', 0, 4) !== HGIF_MAGIC) {
    throw new Error('bad magic');
  }
  if (buf.readUInt32LE(4) !== HGIF_VERSION) {
    throw new Error('unsupported version');
  }
  if (buf.readUInt8(8) !== FAMILY_GEOMETRIC || buf.readUInt8(25) !== ELEM_F32) {
    throw new Error('not a geometric f32 feature file');
  }
  const frameId = Number(buf.readBigUInt64LE(9));
  const count = buf.readUInt32LE(17);
  const descriptorLength = buf.readUInt32LE(21);
  const expect = HGIF_HEADER_SIZE + 8 * count + 4 * count * descriptorLength;
  if (buf.length !== expect) {
    throw new Error(`file is ${buf.length} bytes, layout implies ${expect}`);
  }
  const keypoints = new Float32Array(2 * count);
  const descriptors = new Float32Array(count * descriptorLength);
  let off = HGIF_HEADER_SIZE;
  for (let i = 0; i < keypoints.length; i++, off += 4) {
    keypoints[i] = buf.readFloatLE(off);
  }
  for (let i = 0; i < descriptors.length; i++, off += 4) {
    descriptors[i] = buf.readFloatLE(off);
  }
  return { frameId, keypoints, descriptors, descriptorLength };
}

export interface PgmImage {
  width: number;
  height: number;
  maxval: number;
  /** row-major, scaled to [0, 1] by maxval */
  pixels: Float32Array;
}

/** Serialize a [0, 1] grayscale raster as binary PGM; maxval > 255 selects
 * the two-byte big-endian sample encoding. Values quantize by
 * floor(v * maxval + 0.5). */
export function encodePgm(
  pixels: Float32Array,
  width: number,
  height: number,
  maxval: number,
): Buffer {
  if (width < 1 || height < 1 || pixels.length !== width * height) {
    throw new Error(`raster size ${pixels.length} does not match ${width}x${height}`);
  }
  if (!Number.isInteger(maxval) || maxval < 1 || maxval > 65535) {
    throw new Error(`maxval must lie in 1..65535, got ${maxval}`);
  }
  const header = Buffer.from(`P5\n${width} ${height}\n${maxval}\n`, 'ascii');
  const wide = maxval > 255;
  const raster = Buffer.alloc(pixels.length * (wide ? 2 : 1));
  for (let i = 0; i < pixels.length; i++) {
    const v = Math.min(Math.max(pixels[i], 0), 1);
    const q = Math.floor(v * maxval + 0.5);
    if (wide) {
      raster.writeUInt16BE(q, 2 * i);
    } else {
      raster.writeUInt8(q, i);
    }
  }
  return Buffer.concat([header, raster]);
}

export function writePgm(
  filePath: string,
  pixels: Float32Array,
  width: number,
  height: number,
  maxval = 65535,
): void {
  fs.mkdirSync(path.dirname(filePath), { recursive: true });
  fs.writeFileSync(filePath, encodePgm(pixels, width, height, maxval));
}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0d, 0x0b, 0x0c]);

/** Parse binary PGM (P5), honoring '#' comments in the header. */
export function decodePgm(buf: Buffer): PgmImage {
  let pos = 0;
  const nextToken = (): string => {
    while (pos < buf.length) {
      if (buf[pos] === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      } else if (WHITESPACE.has(buf[pos])) {
        pos++;
      } else {
        break;
      }
    }
    const start = pos;
    while (pos < buf.length && !WHITESPACE.has(buf[pos]) && buf[pos] !== 0x23) pos++;
    if (start === pos) throw new Error('truncated PGM header');
    return buf.toString('ascii', start, pos);
  };
  if (nextToken() !== 'P5') throw new Error('only binary PGM (P5) is supported');
  const width = Number(nextToken());
  const height = Number(nextToken());
  const maxval = Number(nextToken());
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
    throw new Error('bad PGM dimensions');
  }
  if (!Number.isInteger(maxval) || maxval < 1 || maxval > 65535) {
    throw new Error(`maxval must lie in 1..65535, got ${maxval}`);
  }
  pos++; // single whitespace byte separates maxval from the raster
  const wide = maxval > 255;
  const expect = width * height * (wide ? 2 : 1);
  if (buf.length - pos !== expect) {
    throw new Error(`raster holds ${buf.length - pos} bytes, expected ${expect}`);
  }
  const pixels = new Float32Array(width * height);
  for (let i = 0; i < pixels.length; i++) {
    const raw = wide ? buf.readUInt16BE(pos + 2 * i) : buf.readUInt8(pos + i);
    pixels[i] = raw / maxval;
  }
  return { width, height, maxval, pixels };
}

export function readPgm(filePath: string): PgmImage {
  return decodePgm(fs.readFileSync(filePath));
}

/** Artifact names the consumer looks up: zero-padded six-digit frame ids. */
export function geometricFeatureName(frameId: number): string {
  return `${String(frameId).padStart(6, '0')}.geom.hgif`;
}

export function heatmapName(frameId: number): string {
  return `${String(frameId).padStart(6, '0')}.pgm`;
}
