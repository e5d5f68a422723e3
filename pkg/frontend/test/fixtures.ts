import type { UploadReceipt } from "../src/types.js";

/** Mirrors the server's receipt for the bundled mixed-validity daily file:
 * 10 data lines, 2 with the wrong column count (file lines 7 and 9). */
export const MIXED_RECEIPT: UploadReceipt = {
  file_name: "daily.csv",
  request_ids: ["r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8"],
  rejected: [
    {
      line: 7,
      error: {
        code: "column_mismatch",
        message: "line 7: expected 4 columns (batch_id, arrived_at, store, quantity), got 2",
        locus: "line 7",
      },
    },
    {
      line: 9,
      error: {
        code: "column_mismatch",
        message: "line 9: expected 4 columns (batch_id, arrived_at, store, quantity), got 5",
        locus: "line 9",
      },
    },
  ],
  warning: null,
};
