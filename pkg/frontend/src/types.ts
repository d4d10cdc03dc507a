// Client-side mirror of the runtime's wire snapshots. Every field name and
// shape follows the server payload; the console renders these values as
// received and never recomputes them.

export const SCHEMA_VERSION = 1;

export interface Thumbnail {
  width: number;
  height: number;
  pixels: string[]; // row-major hex colors, rendered server-side
}

export interface ProprioPayload {
  x: number;
  y: number;
  gripper: number;
}

export interface ObservationPayload {
  thumbnail: Thumbnail;
  proprio: ProprioPayload;
  timestep: number;
}

export interface RetrievalItem {
  trajectory_id: number;
  timestep: number;
  score: number;
  mode: string;
  thumbnail: Thumbnail;
}

export interface ClusterSummary {
  mode: string;
  count: number;
}

export interface PendingQuery {
  queries_used: number;
  entropy: number;
  observation: ObservationPayload;
  retrieval: RetrievalItem[];
  clusters: ClusterSummary[];
}

export interface RecordSummary {
  success: boolean;
  complete: boolean;
  subgoals: { name: string; ok: boolean }[];
  detected_mode: string;
  feedback_total: number;
  failure: string;
}

export interface Snapshot {
  schema_version: number;
  seq: number;
  status: string; // "paused" | "running" | "waiting_feedback" | "done"
  scenario: string;
  task: string;
  method: string;
  seed: number;
  horizon: number;
  labels: { scene: string[]; demo: string[] };
  t: number;
  observation: ObservationPayload | null;
  proprio: ProprioPayload | null;
  id_score: number | null;
  ood: boolean;
  action: number[] | null;
  entropy: number | null;
  retrieval: RetrievalItem[];
  clusters: ClusterSummary[];
  pending_query: PendingQuery | null;
  record: RecordSummary | null;
}
