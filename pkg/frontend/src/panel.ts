import type { HistoryPoint, QueryBody, ReportSnapshot } from "./types.js";

export type PanelPhase = "idle" | "launching" | "polling" | "done" | "cancelled" | "error";

/**
 * Live view of one forecast report.  Every displayed value mirrors the
 * gateway verbatim: no client-side statistics, no extrapolated progress.
 * History is append-only so the progress chart never rewrites the past.
 */
export class ScenarioPanel {
  readonly history: HistoryPoint[] = [];
  latest: ReportSnapshot | null = null;
  phase: PanelPhase = "idle";
  reportId: string | null = null;
  lastError: string | null = null;

  constructor(
    readonly label: string,
    readonly queryBody: QueryBody,
  ) {}

  markLaunching(): void {
    this.phase = "launching";
  }

  attachReport(reportId: string): void {
    this.reportId = reportId;
    this.phase = "polling";
  }

  applySnapshot(atMs: number, snapshot: ReportSnapshot): void {
    this.latest = snapshot;
    this.lastError = null;
    this.history.push({
      atMs,
      estimate: snapshot.estimate,
      margin: snapshot.margin,
      fractionScanned: snapshot.fractionScanned,
    });
    if (snapshot.status === "done") {
      this.phase = "done";
    } else if (snapshot.status === "cancelled") {
      this.phase = "cancelled";
    } else {
      this.phase = "polling";
    }
  }

  /** Bad responses park the panel in an error state; polling keeps retrying. */
  applyError(message: string): void {
    this.lastError = message;
    this.phase = "error";
  }

  get finished(): boolean {
    return this.phase === "done" || this.phase === "cancelled";
  }

  /** Progress is the gateway's fraction-scanned, never extrapolated. */
  progressFraction(): number {
    return this.latest?.fractionScanned ?? 0;
  }
}
