export interface VolumeInfo {
  id: string;
  shape: [number, number, number]; // (I, J, K) = z, y, x voxel counts
  spacing_mm: [number, number, number];
}

export type Axis = "z" | "y" | "x";

export type WindowPreset = "blood" | "subdural" | "stroke" | "bone";

export interface SearchRequest {
  source_id: string;
  center: [number, number, number];
  box: [number, number, number];
  target_ids: string[];
  stride: [number, number, number];
}

export interface SearchResult {
  target_id: string;
  best_position: [number, number, number];
  best_similarity: number;
}

export type JobState = "pending" | "running" | "done" | "failed";

export interface JobStatus {
  status: JobState;
  results: SearchResult[];
  error?: string;
}
