export {
  ELEM_F32,
  ELEM_U8,
  FAMILY_GEOMETRIC,
  FAMILY_SALIENT,
  GEOM_DESCRIPTOR_LENGTH,
  HGIF_HEADER_SIZE,
  HGIF_MAGIC,
  HGIF_VERSION,
  decodeGeometricFrame,
  decodePgm,
  encodeGeometricFrame,
  encodePgm,
  geometricFeatureName,
  heatmapName,
  readPgm,
  writeGeometricFrame,
  writePgm,
} from './format';
export type { GeometricFrame, PgmImage } from './format';
export {
  CELL_SIZE,
  CheckpointLoadError,
  DESCRIPTOR_CHANNELS,
  DimensionMismatchError,
  ExportError,
  KEYPOINT_CELLS,
  buildKeypointModel,
  buildSaliencyModel,
  checkpointExists,
  loadCheckpoint,
  mulberry32,
  saveCheckpoint,
  seedWeights,
  validateKeypointModel,
  validateSaliencyModel,
} from './model';
export {
  DEFAULT_MAX_KEYPOINTS,
  DEFAULT_THRESHOLD,
  ManifestError,
  createManifest,
  exportGeometric,
  exportSaliency,
  listFrames,
} from './export';
export type {
  ExportManifest,
  ExportOptions,
  FrameEntry,
  GeometricResult,
  SaliencyResult,
} from './export';
