/** Shapes returned by the pipeline API; field names mirror the server. */

export interface ApiError {
  code: string;
  message: string;
  locus: string | null;
}

export interface RejectedLine {
  line: number;
  error: ApiError;
}

export interface UploadReceipt {
  file_name: string;
  request_ids: string[];
  rejected: RejectedLine[];
  warning: string | null;
}

export interface HistoryEntry {
  state: string;
  ts: string;
  detail: string;
}

export interface RequestStatus {
  request_id: string;
  tenant: string;
  state: string;
  history: HistoryEntry[];
  tx_id: string | null;
  block_number: number | null;
  errors: ApiError[];
}

export interface RequestPage {
  tenant: string;
  state: string | null;
  page: number;
  page_size: number;
  total: number;
  items: RequestStatus[];
}

export interface JourneyEntry {
  event: Record<string, unknown>;
  tx_id: string;
  block_number: number;
  channel: string;
}

export interface JourneyResponse {
  epc: string;
  entries: JourneyEntry[];
}

export interface Credentials {
  username: string;
  apiKey: string;
}

export const STATES = ["Received", "Translated", "Processing", "Confirmed", "Failed"] as const;
export const TERMINAL_STATES = new Set(["Confirmed", "Failed"]);
