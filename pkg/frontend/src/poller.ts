import type { ReportSnapshot } from "./types.js";
import type { ScenarioPanel } from "./panel.js";

export interface ReportSource {
  fetchReport(reportId: string): Promise<ReportSnapshot>;
}

export const DEFAULT_POLL_INTERVAL_MS = 500;

/**
 * One polling loop per panel.  A failed poll marks the panel errored and the
 * next tick retries; the loop stops itself once the report finishes.
 */
export class PanelPoller {
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;

  constructor(
    private readonly source: ReportSource,
    private readonly panel: ScenarioPanel,
    private readonly intervalMs: number = DEFAULT_POLL_INTERVAL_MS,
    private readonly now: () => number = () => Date.now(),
  ) {}

  start(): void {
    if (this.timer !== null) {
      return;
    }
    this.timer = setInterval(() => {
      void this.tick();
    }, this.intervalMs);
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

  async tick(): Promise<void> {
    if (this.inFlight || this.panel.reportId === null || this.panel.finished) {
      return;
    }
    this.inFlight = true;
    try {
      const snapshot = await this.source.fetchReport(this.panel.reportId);
      this.panel.applySnapshot(this.now(), snapshot);
      if (this.panel.finished) {
        this.stop();
      }
    } catch (err) {
      this.panel.applyError(err instanceof Error ? err.message : String(err));
    } finally {
      this.inFlight = false;
    }
  }
}
