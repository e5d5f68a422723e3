/** Upload panel: drag-and-drop (or file picker) -> POST /upload -> per-line
 * receipt. Accepted rows link to the status board; rejected rows show the
 * line number and the API's message verbatim. Network failures keep the
 * file around and offer a retry. */

import { ApiClient, AuthRequiredError } from "./api.js";
import { receiptRows, receiptTotals, rowsMatchReceipt } from "./model.js";
import type { UploadReceipt } from "./types.js";

export interface UploadPanelHooks {
  onAuthRequired: () => void;
  onInspectRequest: (requestId: string) => void;
}

export class UploadPanel {
  private readonly api: ApiClient;
  private readonly root: HTMLElement;
  private readonly hooks: UploadPanelHooks;
  private pendingFile: File | null = null;
  readonly history: Array<{ fileName: string; accepted: number; rejected: number }> = [];

  constructor(root: HTMLElement, api: ApiClient, hooks: UploadPanelHooks) {
    this.root = root;
    this.api = api;
    this.hooks = hooks;
    this.render();
  }

  private el<K extends keyof HTMLElementTagNameMap>(tag: K, cls?: string, text?: string) {
    const node = document.createElement(tag);
    if (cls) node.className = cls;
    if (text !== undefined) node.textContent = text;
    return node;
  }

  private render(): void {
    this.root.innerHTML = "";
    const zone = this.el("div", "dropzone");
    zone.id = "dropzone";
    zone.textContent = "Drop the daily file here, or ";
    const picker = this.el("input") as HTMLInputElement;
    picker.type = "file";
    picker.id = "file-picker";
    picker.addEventListener("change", () => {
      const file = picker.files && picker.files[0];
      if (file) void this.submit(file);
    });
    zone.appendChild(picker);

    const stop = (e: Event) => {
      e.preventDefault();
      e.stopPropagation();
    };
    for (const name of ["dragenter", "dragover", "dragleave", "drop"]) {
      zone.addEventListener(name, stop);
    }
    zone.addEventListener("dragover", () => zone.classList.add("armed"));
    zone.addEventListener("dragleave", () => zone.classList.remove("armed"));
    zone.addEventListener("drop", (e) => {
      zone.classList.remove("armed");
      const files = (e as DragEvent).dataTransfer?.files;
      if (!files || files.length === 0) return;
      if (files.length > 1) {
        this.note("one file at a time, please", "warn");
        return;
      }
      void this.submit(files[0]!);
    });

    this.root.appendChild(zone);
    this.root.appendChild(this.el("div", "upload-note"));
    const results = this.el("div", "upload-results");
    results.id = "upload-results";
    this.root.appendChild(results);
    const past = this.el("ul", "upload-history");
    past.id = "upload-history";
    this.root.appendChild(past);
  }

  private renderHistory(): void {
    const list = this.root.querySelector("#upload-history") as HTMLElement;
    list.innerHTML = "";
    for (const entry of [...this.history].reverse()) {
      list.appendChild(
        this.el("li", "", `${entry.fileName}: ${entry.accepted} accepted, ${entry.rejected} rejected`),
      );
    }
  }

  private note(text: string, cls = ""): void {
    const node = this.root.querySelector(".upload-note") as HTMLElement;
    node.textContent = text;
    node.className = `upload-note ${cls}`.trim();
  }

  async submit(file: File): Promise<void> {
    this.pendingFile = file;
    this.note(`uploading ${file.name}…`);
    let receipt: UploadReceipt;
    try {
      receipt = await this.api.upload(file);
    } catch (err) {
      if (err instanceof AuthRequiredError) {
        this.hooks.onAuthRequired();
        this.note("session rejected; sign in and retry", "warn");
        this.offerRetry();
        return;
      }
      this.note(`upload failed: ${String((err as Error).message ?? err)}`, "warn");
      this.offerRetry();
      return;
    }
    this.pendingFile = null;
    this.renderReceipt(receipt);
  }

  private offerRetry(): void {
    const results = this.root.querySelector("#upload-results") as HTMLElement;
    results.innerHTML = "";
    const retry = this.el("button", "retry", "retry upload");
    retry.id = "retry-upload";
    retry.addEventListener("click", () => {
      if (this.pendingFile) void this.submit(this.pendingFile);
    });
    results.appendChild(retry);
  }

  private renderReceipt(receipt: UploadReceipt): void {
    const results = this.root.querySelector("#upload-results") as HTMLElement;
    results.innerHTML = "";
    const rows = receiptRows(receipt);
    if (!rowsMatchReceipt(rows, receipt)) {
      // should be impossible; surfacing beats silently mis-rendering
      this.note("internal error: rendered rows diverge from receipt", "warn");
      return;
    }
    const totals = receiptTotals(receipt);
    this.history.push({ fileName: receipt.file_name, accepted: totals.accepted, rejected: totals.rejected });
    this.renderHistory();
    this.note(
      `${receipt.file_name}: ${totals.accepted} accepted, ${totals.rejected} rejected` +
        (receipt.warning ? ` — ${receipt.warning}` : ""),
      totals.rejected ? "warn" : "good",
    );

    const table = this.el("table", "receipt");
    const head = this.el("tr");
    for (const h of ["", "line", "request", "result"]) head.appendChild(this.el("th", "", h));
    table.appendChild(head);
    for (const row of rows) {
      const tr = this.el("tr", row.kind === "accepted" ? "row-accepted" : "row-rejected");
      tr.appendChild(this.el("td", "mark", row.kind === "accepted" ? "✓" : "✗"));
      tr.appendChild(this.el("td", "line", row.line === null ? "" : String(row.line)));
      const idCell = this.el("td", "rid");
      if (row.requestId) {
        const link = this.el("a", "", row.requestId);
        (link as HTMLAnchorElement).href = "#";
        link.addEventListener("click", (e) => {
          e.preventDefault();
          this.hooks.onInspectRequest(row.requestId!);
        });
        idCell.appendChild(link);
      }
      tr.appendChild(idCell);
      tr.appendChild(this.el("td", "msg", row.message));
      table.appendChild(tr);
    }
    results.appendChild(table);
  }
}
