export interface CaseMeta {
  id: string;
  dims: [number, number, number];
  spacing: number[];
  classes: string[];
  k: number;
  threshold: number;
  has_truth: boolean;
  volumes: string[];
}

export interface SlicePayload {
  volume: string;
  axis: number;
  index: number;
  shape: [number, number];
  dtype: string;
  data: string; // base64, row-major
  range: [number, number];
}

export interface Slice {
  volume: string;
  axis: number;
  index: number;
  width: number; // shape[1], fastest-varying
  height: number; // shape[0]
  values: Float32Array;
  range: [number, number];
}

export interface Suggestion {
  rank: number;
  mean_agreement: number;
  size: number;
  bbox: [number, number, number, number, number, number];
  dominant_class: number;
  voxels: [number, number, number][];
}

export interface SuggestionsDoc {
  volume_id: string;
  K: number;
  threshold: number;
  suggestions: Suggestion[];
}

export interface CorrectionResult {
  applied: number;
  total_corrections: number;
}

export interface ExportResult {
  labels_nii: string;
  labels_native: string;
  audit: string;
  num_corrections: number;
}

export interface Histograms {
  k: number;
  bin_values: number[];
  classes: Record<string, { correct: number[]; incorrect: number[] }>;
}

export type Voxel = [number, number, number];
