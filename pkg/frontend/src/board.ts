/** Status board: a polling table of the tenant's requests. Every state
 * string shown is byte-for-byte what the status API returned; nothing is
 * inferred client-side. Failed rows expand to their errors; any row expands
 * to its full history and ledger correlation. */

import { ApiClient, AuthRequiredError } from "./api.js";
import { errorLines, formatHistory, shortId, stateClass } from "./model.js";
import { Poller } from "./poller.js";
import type { RequestPage, RequestStatus } from "./types.js";

export const DEFAULT_POLL_MS = 2000;

export interface BoardHooks {
  onAuthRequired: () => void;
}

export class StatusBoard {
  private readonly api: ApiClient;
  private readonly root: HTMLElement;
  private readonly hooks: BoardHooks;
  readonly poller: Poller<RequestPage>;
  private stateFilter: string | null = null;
  private expanded: Set<string> = new Set();
  private lastPage: RequestPage | null = null;

  constructor(root: HTMLElement, api: ApiClient, hooks: BoardHooks, pollMs = DEFAULT_POLL_MS) {
    this.root = root;
    this.api = api;
    this.hooks = hooks;
    this.render();
    this.poller = new Poller<RequestPage>({
      intervalMs: pollMs,
      fetchOnce: () => this.api.listRequests(this.stateFilter),
      onData: (page) => this.renderRows(page),
      onStale: (sinceMs, err) => this.renderStale(sinceMs, err),
    });
  }

  start(): void {
    this.poller.start();
  }

  stop(): void {
    this.poller.stop();
  }

  focusRequest(requestId: string): void {
    this.expanded.add(requestId);
    void this.poller.tick();
  }

  private el<K extends keyof HTMLElementTagNameMap>(tag: K, cls?: string, text?: string) {
    const node = document.createElement(tag);
    if (cls) node.className = cls;
    if (text !== undefined) node.textContent = text;
    return node;
  }

  private render(): void {
    this.root.innerHTML = "";
    const bar = this.el("div", "board-bar");
    const label = this.el("label", "", "state: ");
    const select = this.el("select") as HTMLSelectElement;
    select.id = "state-filter";
    for (const value of ["(all)", "Received", "Translated", "Processing", "Confirmed", "Failed"]) {
      const opt = this.el("option", "", value) as HTMLOptionElement;
      opt.value = value === "(all)" ? "" : value;
      select.appendChild(opt);
    }
    select.addEventListener("change", () => {
      this.stateFilter = select.value || null;
      void this.poller.tick();
    });
    label.appendChild(select);
    bar.appendChild(label);
    bar.appendChild(this.el("span", "stale-banner"));
    this.root.appendChild(bar);
    const table = this.el("table", "board");
    table.id = "board-table";
    this.root.appendChild(table);
  }

  private renderStale(sinceMs: number, err: unknown): void {
    if (err instanceof AuthRequiredError) {
      this.hooks.onAuthRequired();
    }
    const banner = this.root.querySelector(".stale-banner") as HTMLElement;
    const seconds = Math.round(sinceMs / 1000);
    banner.textContent =
      sinceMs > 0
        ? `status API unavailable — showing data from ${seconds}s ago`
        : "status API unavailable — nothing loaded yet";
    banner.classList.add("visible");
  }

  private renderRows(page: RequestPage): void {
    this.lastPage = page;
    const banner = this.root.querySelector(".stale-banner") as HTMLElement;
    banner.textContent = "";
    banner.classList.remove("visible");

    const table = this.root.querySelector("#board-table") as HTMLElement;
    table.innerHTML = "";
    const head = this.el("tr");
    for (const h of ["request", "state", "updated", "ledger", ""]) head.appendChild(this.el("th", "", h));
    table.appendChild(head);

    for (const status of page.items) {
      table.appendChild(this.row(status));
      if (this.expanded.has(status.request_id)) {
        table.appendChild(this.detailRow(status));
      }
    }
    if (page.items.length === 0) {
      const tr = this.el("tr", "empty-row");
      const td = this.el("td", "", "no requests yet");
      td.colSpan = 5;
      tr.appendChild(td);
      table.appendChild(tr);
    }
  }

  private row(status: RequestStatus): HTMLElement {
    const tr = this.el("tr", "status-row");
    tr.dataset.requestId = status.request_id;
    tr.appendChild(this.el("td", "rid", shortId(status.request_id, 12)));
    // the state cell is the API's state string, untouched
    tr.appendChild(this.el("td", `state ${stateClass(status.state)}`, status.state));
    const last = status.history[status.history.length - 1];
    tr.appendChild(this.el("td", "ts", last ? last.ts : ""));
    const ledger =
      status.tx_id && status.block_number !== null
        ? `block ${status.block_number} · ${shortId(status.tx_id, 12)}`
        : "";
    tr.appendChild(this.el("td", "ledger", ledger));
    const toggle = this.el("td", "toggle", this.expanded.has(status.request_id) ? "▾" : "▸");
    toggle.addEventListener("click", () => {
      if (this.expanded.has(status.request_id)) {
        this.expanded.delete(status.request_id);
      } else {
        this.expanded.add(status.request_id);
      }
      if (this.lastPage) this.renderRows(this.lastPage);
    });
    tr.appendChild(toggle);
    return tr;
  }

  private detailRow(status: RequestStatus): HTMLElement {
    const tr = this.el("tr", "detail-row");
    const td = this.el("td");
    td.colSpan = 5;
    const pane = this.el("div", "detail");
    pane.appendChild(this.el("div", "detail-id", status.request_id));
    const hist = this.el("ul", "history");
    for (const line of formatHistory(status)) hist.appendChild(this.el("li", "", line));
    pane.appendChild(hist);
    if (status.errors.length > 0) {
      const errs = this.el("ul", "errors");
      for (const line of errorLines(status)) errs.appendChild(this.el("li", "", line));
      pane.appendChild(errs);
    }
    if (status.tx_id) {
      pane.appendChild(this.el("div", "tx", `tx ${status.tx_id} in block ${status.block_number}`));
    }
    td.appendChild(pane);
    tr.appendChild(td);
    return tr;
  }
}
