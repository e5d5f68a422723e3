import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";
import { StatusBoard } from "../src/board.js";
import type { RequestPage, RequestStatus } from "../src/types.js";

function status(id: string, state: string, extra: Partial<RequestStatus> = {}): RequestStatus {
  return {
    request_id: id,
    tenant: "retail",
    state,
    history: [{ state, ts: "2026-06-02T08:00:00Z", detail: "" }],
    tx_id: null,
    block_number: null,
    errors: [],
    ...extra,
  };
}

function page(items: RequestStatus[], state: string | null = null): RequestPage {
  return { tenant: "retail", state, page: 0, page_size: 100, total: items.length, items };
}

function makeBoard(listImpl: (state: string | null) => Promise<RequestPage>) {
  document.body.innerHTML = '<div id="board-root"></div>';
  const api = new ApiClient("http://api");
  const listSpy = vi
    .spyOn(api, "listRequests")
    .mockImplementation((state: string | null) => listImpl(state));
  const hooks = { onAuthRequired: vi.fn() };
  const board = new StatusBoard(document.getElementById("board-root")!, api, hooks, 2000);
  return { board, api, hooks, listSpy };
}

function renderedStates(): Array<{ id: string; state: string }> {
  return [...document.querySelectorAll("tr.status-row")].map((tr) => ({
    id: (tr as HTMLElement).dataset.requestId!,
    state: tr.querySelector("td.state")!.textContent!,
  }));
}

describe("StatusBoard", () => {
  beforeEach(() => {
    vi.useFakeTimers();
  });
  afterEach(() => {
    vi.useRealTimers();
    document.body.innerHTML = "";
  });

  it("rows progress Received -> ... -> Confirmed on polls without manual refresh", async () => {
    const phases = [
      page(["r1", "r2"].map((id) => status(id, "Received"))),
      page(["r1", "r2"].map((id) => status(id, "Translated"))),
      page(["r1", "r2"].map((id) => status(id, "Processing"))),
      page([
        status("r1", "Confirmed", { tx_id: "t".repeat(64), block_number: 4 }),
        status("r2", "Confirmed", { tx_id: "u".repeat(64), block_number: 5 }),
      ]),
    ];
    let call = 0;
    const { board } = makeBoard(async () => phases[Math.min(call++, phases.length - 1)]!);
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    expect(renderedStates().map((r) => r.state)).toEqual(["Received", "Received"]);
    await vi.advanceTimersByTimeAsync(2000);
    expect(renderedStates().map((r) => r.state)).toEqual(["Translated", "Translated"]);
    await vi.advanceTimersByTimeAsync(4000);
    expect(renderedStates().map((r) => r.state)).toEqual(["Confirmed", "Confirmed"]);
    const ledger = [...document.querySelectorAll("td.ledger")].map((td) => td.textContent);
    expect(ledger[0]).toContain("block 4");
    board.stop();
  });

  it("every rendered state string equals the API payload byte-for-byte", async () => {
    const items = [
      status("a", "Received"),
      status("b", "Translated"),
      status("c", "Processing"),
      status("d", "Confirmed", { tx_id: "t".repeat(64), block_number: 1 }),
      status("e", "Failed", { errors: [{ code: "x", message: "boom", locus: null }] }),
    ];
    const { board } = makeBoard(async () => page(items));
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    const rendered = renderedStates();
    expect(rendered).toHaveLength(items.length);
    for (let i = 0; i < items.length; i++) {
      expect(rendered[i]!.state).toBe(items[i]!.state);
    }
    board.stop();
  });

  it("passes the state filter through to the API and shows only its rows", async () => {
    const asked: Array<string | null> = [];
    const { board } = makeBoard(async (state) => {
      asked.push(state);
      return page([status("f1", "Failed", { errors: [{ code: "x", message: "m", locus: null }] })], state);
    });
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    const select = document.getElementById("state-filter") as HTMLSelectElement;
    select.value = "Failed";
    select.dispatchEvent(new Event("change"));
    await vi.advanceTimersByTimeAsync(0);
    expect(asked[asked.length - 1]).toBe("Failed");
    expect(renderedStates().map((r) => r.state)).toEqual(["Failed"]);
    board.stop();
  });

  it("failed rows expand to show their errors", async () => {
    const failed = status("f1", "Failed", {
      errors: [{ code: "column_mismatch", message: "line 7: expected 4 columns", locus: "line 7" }],
    });
    const { board } = makeBoard(async () => page([failed]));
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    (document.querySelector("td.toggle") as HTMLElement).click();
    const detail = document.querySelector(".detail")!;
    expect(detail.textContent).toContain("column_mismatch");
    expect(detail.textContent).toContain("line 7");
    board.stop();
  });

  it("shows a stale banner with the data age when the API fails, keeping old rows", async () => {
    let fail = false;
    const { board } = makeBoard(async () => {
      if (fail) throw new TypeError("api down");
      return page([status("r1", "Received")]);
    });
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    fail = true;
    await vi.advanceTimersByTimeAsync(2000);
    const banner = document.querySelector(".stale-banner")!;
    expect(banner.classList.contains("visible")).toBe(true);
    expect(banner.textContent).toContain("unavailable");
    expect(renderedStates()).toHaveLength(1); // last good data still shown
    fail = false;
    await vi.advanceTimersByTimeAsync(2000);
    expect(document.querySelector(".stale-banner")!.classList.contains("visible")).toBe(false);
    board.stop();
  });

  it("empty tenant renders an empty table without errors", async () => {
    const { board } = makeBoard(async () => page([]));
    board.start();
    await vi.advanceTimersByTimeAsync(0);
    expect(document.querySelector(".empty-row")).not.toBeNull();
    board.stop();
  });

  it("focusRequest expands the row on the next render", async () => {
    const confirmed = status("rX", "Confirmed", { tx_id: "t".repeat(64), block_number: 2 });
    const { board } = makeBoard(async () => page([confirmed]));
    board.focusRequest("rX");
    await vi.advanceTimersByTimeAsync(0);
    expect(document.querySelector(".detail-id")!.textContent).toBe("rX");
    expect(document.querySelector(".detail .tx")!.textContent).toContain("block 2");
  });
});
