/** Pure view-model helpers; everything rendered derives from API payloads. */

import type { RejectedLine, RequestStatus, UploadReceipt } from "./types.js";

export interface ReceiptRow {
  kind: "accepted" | "rejected";
  line: number | null;
  requestId: string | null;
  message: string;
}

/** One row per outcome: accepted request ids first, then rejected lines in
 * file order. Messages for rejected lines are exactly what the API said. */
export function receiptRows(receipt: UploadReceipt): ReceiptRow[] {
  const rows: ReceiptRow[] = receipt.request_ids.map((id) => ({
    kind: "accepted",
    line: null,
    requestId: id,
    message: "accepted",
  }));
  for (const rejected of receipt.rejected) {
    rows.push({
      kind: "rejected",
      line: rejected.line,
      requestId: null,
      message: rejected.error.message,
    });
  }
  return rows;
}

export interface ReceiptTotals {
  accepted: number;
  rejected: number;
  total: number;
}

export function receiptTotals(receipt: UploadReceipt): ReceiptTotals {
  return {
    accepted: receipt.request_ids.length,
    rejected: receipt.rejected.length,
    total: receipt.request_ids.length + receipt.rejected.length,
  };
}

/** Rendered rows must account for every outcome the API reported. */
export function rowsMatchReceipt(rows: ReceiptRow[], receipt: UploadReceipt): boolean {
  const totals = receiptTotals(receipt);
  const accepted = rows.filter((r) => r.kind === "accepted").length;
  const rejected = rows.filter((r) => r.kind === "rejected").length;
  return accepted === totals.accepted && rejected === totals.rejected;
}

export function rejectedSummary(rejected: RejectedLine[]): string {
  if (rejected.length === 0) return "";
  const lines = rejected.map((r) => r.line).join(", ");
  return `${rejected.length} line(s) rejected: ${lines}`;
}

const STATE_CLASSES: Record<string, string> = {
  Received: "state-received",
  Translated: "state-translated",
  Processing: "state-processing",
  Confirmed: "state-confirmed",
  Failed: "state-failed",
};

export function stateClass(state: string): string {
  return STATE_CLASSES[state] ?? "state-unknown";
}

export function shortId(id: string, n = 10): string {
  return id.length <= n ? id : `${id.slice(0, n)}…`;
}

export function formatHistory(status: RequestStatus): string[] {
  return status.history.map((h) => {
    const detail = h.detail ? ` — ${h.detail}` : "";
    return `${h.ts}  ${h.state}${detail}`;
  });
}

export function errorLines(status: RequestStatus): string[] {
  return status.errors.map((e) => {
    const locus = e.locus ? ` [${e.locus}]` : "";
    return `${e.code}${locus}: ${e.message}`;
  });
}
