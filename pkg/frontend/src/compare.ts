import type { ScenarioPanel } from "./panel.js";

export interface ScenarioRow {
  label: string;
  reportId: string | null;
  phase: string;
  estimate: number | null;
  margin: number | null;
  fractionScanned: number;
}

export interface ScenarioDelta {
  a: string;
  b: string;
  delta: number;
  /** False while the two margin intervals overlap. */
  distinguishable: boolean;
}

export interface ComparisonView {
  rows: ScenarioRow[];
  deltas: ScenarioDelta[];
}

export const NOT_DISTINGUISHABLE = "not distinguishable yet";

export function deltaLabel(delta: ScenarioDelta): string {
  if (!delta.distinguishable) {
    return NOT_DISTINGUISHABLE;
  }
  const sign = delta.delta > 0 ? "+" : "";
  return `${sign}${delta.delta.toFixed(1)}`;
}

/** Side-by-side reach estimates with pairwise differences. */
export function compareScenarios(panels: ScenarioPanel[]): ComparisonView {
  const rows: ScenarioRow[] = panels.map((panel) => ({
    label: panel.label,
    reportId: panel.reportId,
    phase: panel.phase,
    estimate: panel.latest?.estimate ?? null,
    margin: panel.latest?.margin ?? null,
    fractionScanned: panel.progressFraction(),
  }));
  const deltas: ScenarioDelta[] = [];
  for (let i = 0; i < panels.length; i += 1) {
    for (let j = i + 1; j < panels.length; j += 1) {
      const a = panels[i];
      const b = panels[j];
      if (!a?.latest || !b?.latest) {
        continue;
      }
      const difference = a.latest.estimate - b.latest.estimate;
      deltas.push({
        a: a.label,
        b: b.label,
        delta: difference,
        distinguishable: Math.abs(difference) > a.latest.margin + b.latest.margin,
      });
    }
  }
  return { rows, deltas };
}
