/** Wire types of the session service /v1 API. */

export interface Candidate {
  image_id: string;
  score: number;
  rank: number;
  uri: string | null;
}

export interface HistoryEntry {
  round: number;
  caption: string;
  caption_source: string;
  /** Present in study mode only. */
  target_rank?: number;
  target_in_pool?: boolean;
}

export interface SessionStatus {
  kind: string; // running | hit | exhausted | finished (blind)
  round?: number | null;
  rank?: number | null;
}

export interface SessionView {
  session_id: string;
  mode: string;
  round: number;
  r_max: number;
  terminal: boolean;
  status: SessionStatus;
  candidates: Candidate[];
  history: HistoryEntry[];
  /** Present in study mode only. */
  target?: { image_id: string; uri: string | null };
}

export interface GalleryInfo {
  gallery_id: string;
  n: number;
  d: number;
  subset_tag: string | null;
}

export interface CreateSessionRequest {
  gallery_id: string;
  triplet_id?: string;
  reference_id?: string;
  caption?: string;
  target_ids?: string[];
  mode?: "study" | "blind";
  config?: Record<string, unknown>;
}
