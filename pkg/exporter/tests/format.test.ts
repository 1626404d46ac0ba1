import { describe, expect, it } from 'vitest';

import {
  decodeGeometricFrame,
  decodePgm,
  encodeGeometricFrame,
  encodePgm,
  geometricFeatureName,
  heatmapName,
  HGIF_HEADER_SIZE,
} from '../src/format';

function sampleFrame(count: number, length = 4) {
  const keypoints = new Float32Array(2 * count);
  const descriptors = new Float32Array(count * length);
  for (let i = 0; i < keypoints.length; i++) keypoints[i] = i + 0.5;
  for (let i = 0; i < descriptors.length; i++) descriptors[i] = Math.fround(Math.sin(i));
  return { frameId: 42, keypoints, descriptors, descriptorLength: length };
}

describe('geometric feature encoding', () => {
  it('lays out the header field by field', () => {
    const buf = encodeGeometricFrame(sampleFrame(3));
    expect(buf.toString('ascii', 0, 4)).toBe('HGIF');
    expect(buf.readUInt32LE(4)).toBe(1); // version
    expect(buf.readUInt8(8)).toBe(0); // family: geometric
    expect(buf.readBigUInt64LE(9)).toBe(42n);
    expect(buf.readUInt32LE(17)).toBe(3); // keypoint count
    expect(buf.readUInt32LE(21)).toBe(4); // descriptor length
    expect(buf.readUInt8(25)).toBe(0); // element type: f32
    expect(buf.length).toBe(HGIF_HEADER_SIZE + 3 * 8 + 3 * 4 * 4);
  });

  it('stores keypoint pairs before descriptor rows, little-endian f32', () => {
    const frame = sampleFrame(2, 3);
    const buf = encodeGeometricFrame(frame);
    expect(buf.readFloatLE(26)).toBeCloseTo(0.5, 6); // x0
    expect(buf.readFloatLE(30)).toBeCloseTo(1.5, 6); // y0
    expect(buf.readFloatLE(34)).toBeCloseTo(2.5, 6); // x1
    expect(buf.readFloatLE(38)).toBeCloseTo(3.5, 6); // y1
    const descStart = 26 + 2 * 8;
    for (let i = 0; i < 6; i++) {
      expect(buf.readFloatLE(descStart + 4 * i)).toBe(frame.descriptors[i]);
    }
  });

  it('round trips exactly', () => {
    const frame = sampleFrame(5, 8);
    const back = decodeGeometricFrame(encodeGeometricFrame(frame));
    expect(back.frameId).toBe(frame.frameId);
    expect(back.descriptorLength).toBe(frame.descriptorLength);
    expect(Array.from(back.keypoints)).toEqual(Array.from(frame.keypoints));
    expect(Array.from(back.descriptors)).toEqual(Array.from(frame.descriptors));
  });

  it('handles an empty frame', () => {
    const buf = encodeGeometricFrame({
      frameId: 0,
      keypoints: new Float32Array(0),
      descriptors: new Float32Array(0),
      descriptorLength: 256,
    });
    expect(buf.length).toBe(HGIF_HEADER_SIZE);
    expect(decodeGeometricFrame(buf).keypoints.length).toBe(0);
  });

  it('rejects inconsistent inputs', () => {
    const frame = sampleFrame(2);
    expect(() =>
      encodeGeometricFrame({ ...frame, keypoints: new Float32Array(3) }),
    ).toThrow(/pairs/);
    expect(() =>
      encodeGeometricFrame({ ...frame, descriptors: new Float32Array(7) }),
    ).toThrow(/descriptor buffer/);
    expect(() => encodeGeometricFrame({ ...frame, frameId: -1 })).toThrow(/non-negative/);
    expect(() => encodeGeometricFrame({ ...frame, frameId: 1.5 })).toThrow(/non-negative/);
  });

  it('rejects malformed buffers', () => {
    const good = encodeGeometricFrame(sampleFrame(2));
    expect(() => decodeGeometricFrame(good.subarray(0, 10))).toThrow(/shorter/);
    const magic = Buffer.from(good);
    magic.write('XGIF', 0, 'ascii');
    expect(() => decodeGeometricFrame(magic)).toThrow(/magic/);
    const version = Buffer.from(good);
    version.writeUInt32LE(9, 4);
    expect(() => decodeGeometricFrame(version)).toThrow(/version/);
    expect(() =>
      decodeGeometricFrame(Buffer.concat([good, Buffer.from([0])])),
    ).toThrow(/bytes/);
  });
});

describe('pgm encoding', () => {
  it('writes a 16-bit big-endian raster by default convention', () => {
    const buf = encodePgm(new Float32Array([0, 258 / 65535, 1]), 3, 1, 65535);
    expect(buf.subarray(0, 13).toString('ascii')).toBe('P5\n3 1\n65535\n');
    const raster = buf.subarray(13);
    expect(Array.from(raster)).toEqual([0x00, 0x00, 0x01, 0x02, 0xff, 0xff]);
  });

  it('quantizes by floor(v * maxval + 0.5) and clamps', () => {
    const buf = encodePgm(new Float32Array([0.5, -0.2, 1.7]), 3, 1, 255);
    const raster = buf.subarray(buf.length - 3);
    expect(Array.from(raster)).toEqual([128, 0, 255]);
  });

  it('round trips', () => {
    const pixels = new Float32Array([0, 0.25, 0.5, 0.75, 1, 0.125]);
    const img = decodePgm(encodePgm(pixels, 3, 2, 65535));
    expect(img.width).toBe(3);
    expect(img.height).toBe(2);
    expect(img.maxval).toBe(65535);
    for (let i = 0; i < pixels.length; i++) {
      expect(img.pixels[i]).toBeCloseTo(pixels[i], 4);
    }
  });

  it('honors header comments', () => {
    const body = Buffer.from([1, 2]);
    const buf = Buffer.concat([Buffer.from('P5\n# made by hand\n2 1\n# more\n255\n'), body]);
    const img = decodePgm(buf);
    expect(img.width).toBe(2);
    expect(img.pixels[1]).toBeCloseTo(2 / 255, 6);
  });

  it('rejects what it cannot represent', () => {
    expect(() => encodePgm(new Float32Array(3), 2, 2, 255)).toThrow(/does not match/);
    expect(() => encodePgm(new Float32Array(4), 2, 2, 0)).toThrow(/maxval/);
    expect(() => encodePgm(new Float32Array(4), 2, 2, 70000)).toThrow(/maxval/);
    expect(() => decodePgm(Buffer.from('P2\n2 1\n255\n1 2'))).toThrow(/P5/);
    expect(() => decodePgm(Buffer.from('P5\n2 1\n255\n\x01'))).toThrow(/raster/);
    expect(() => decodePgm(Buffer.from('P5\n2 1\n'))).toThrow(/truncated/);
  });
});

describe('artifact names', () => {
  it('zero-pads frame ids to six digits', () => {
    expect(geometricFeatureName(7)).toBe('000007.geom.hgif');
    expect(geometricFeatureName(123456)).toBe('123456.geom.hgif');
    expect(heatmapName(0)).toBe('000000.pgm');
  });
});
