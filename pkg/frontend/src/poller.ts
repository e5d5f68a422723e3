/** Fixed-interval poller with overlap protection and staleness tracking.
 * The board never invents data: on failure it keeps showing the last good
 * payload and reports how stale it is. */

export interface PollerOptions<T> {
  intervalMs: number;
  fetchOnce: () => Promise<T>;
  onData: (data: T) => void;
  onStale: (sinceMs: number, error: unknown) => void;
  now?: () => number;
}

export class Poller<T> {
  private readonly opts: PollerOptions<T>;
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;
  private lastSuccessAt: number | null = null;

  constructor(opts: PollerOptions<T>) {
    this.opts = opts;
  }

  private now(): number {
    return this.opts.now ? this.opts.now() : Date.now();
  }

  get staleForMs(): number | null {
    return this.lastSuccessAt === null ? null : this.now() - this.lastSuccessAt;
  }

  async tick(): Promise<void> {
    if (this.inFlight) return; // never stack slow requests
    this.inFlight = true;
    try {
      const data = await this.opts.fetchOnce();
      this.lastSuccessAt = this.now();
      this.opts.onData(data);
    } catch (err) {
      const since = this.lastSuccessAt === null ? 0 : this.now() - this.lastSuccessAt;
      this.opts.onStale(since, err);
    } finally {
      this.inFlight = false;
    }
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.opts.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  get running(): boolean {
    return this.timer !== null;
  }
}
