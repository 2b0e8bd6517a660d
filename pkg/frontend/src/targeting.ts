import type { QueryBody, SchemaInfo } from "./types.js";

/**
 * Interactive targeting constraints: per-feature selected value sets.
 * An empty draft means count-all.
 */
export class TargetingDraft {
  private readonly selections = new Map<string, Set<number>>();

  constructor(readonly schema: SchemaInfo) {}

  private cardinalityOf(feature: string): number {
    const found = this.schema.features.find((f) => f.name === feature);
    if (!found) {
      throw new Error(`unknown feature ${feature}`);
    }
    return found.cardinality;
  }

  toggle(feature: string, value: number): void {
    const cardinality = this.cardinalityOf(feature);
    if (!Number.isInteger(value) || value < 1 || value > cardinality) {
      throw new Error(`feature ${feature}: value ${value} outside 1..${cardinality}`);
    }
    const current = this.selections.get(feature) ?? new Set<number>();
    if (current.has(value)) {
      current.delete(value);
    } else {
      current.add(value);
    }
    if (current.size === 0) {
      this.selections.delete(feature);
    } else {
      this.selections.set(feature, current);
    }
  }

  clear(feature?: string): void {
    if (feature === undefined) {
      this.selections.clear();
    } else {
      this.selections.delete(feature);
    }
  }

  selected(feature: string): number[] {
    return [...(this.selections.get(feature) ?? [])].sort((a, b) => a - b);
  }

  isEmpty(): boolean {
    return this.selections.size === 0;
  }

  toQueryBody(): QueryBody {
    const body: QueryBody = {};
    for (const [feature, values] of this.selections) {
      body[feature] = [...values].sort((a, b) => a - b);
    }
    return body;
  }

  describe(): string {
    if (this.isEmpty()) {
      return "everyone";
    }
    return this.schema.features
      .filter((f) => this.selections.has(f.name))
      .map((f) => `${f.name} in {${this.selected(f.name).join(",")}}`)
      .join(", ");
  }

  /**
   * True when this draft can only match a subset of the other draft's rows:
   * every feature the other constrains is constrained here to a value subset.
   * Used for the client-side "narrower targeting" sanity hint only.
   */
  isNarrowerThan(other: TargetingDraft): boolean {
    for (const [feature, otherValues] of other.selections) {
      const mine = this.selections.get(feature);
      if (!mine) {
        return false;
      }
      for (const value of mine) {
        if (!otherValues.has(value)) {
          return false;
        }
      }
    }
    return true;
  }
}
