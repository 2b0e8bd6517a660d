import { describe, expect, it } from "vitest";

import { TargetingDraft } from "../src/targeting.js";
import { timelines } from "./replay.js";

const schema = timelines.schema;

describe("targeting drafts", () => {
  it("empty draft means count-all", () => {
    const draft = new TargetingDraft(schema);
    expect(draft.isEmpty()).toBe(true);
    expect(draft.toQueryBody()).toEqual({});
    expect(draft.describe()).toBe("everyone");
  });

  it("toggle adds then removes a value", () => {
    const draft = new TargetingDraft(schema);
    draft.toggle("age", 2);
    draft.toggle("age", 3);
    expect(draft.toQueryBody()).toEqual({ age: [2, 3] });
    draft.toggle("age", 2);
    expect(draft.toQueryBody()).toEqual({ age: [3] });
    draft.toggle("age", 3);
    expect(draft.isEmpty()).toBe(true);
  });

  it("rejects values outside the schema", () => {
    const draft = new TargetingDraft(schema);
    expect(() => draft.toggle("age", 99)).toThrow(/outside/);
    expect(() => draft.toggle("nonsense", 1)).toThrow(/unknown feature/);
  });

  it("narrower drafts are detected for the sanity hint", () => {
    const wide = new TargetingDraft(schema);
    wide.toggle("age", 1);
    wide.toggle("age", 2);
    const narrow = new TargetingDraft(schema);
    narrow.toggle("age", 1);
    narrow.toggle("geo", 2);
    expect(narrow.isNarrowerThan(wide)).toBe(true);
    expect(wide.isNarrowerThan(narrow)).toBe(false);
    // disjoint selections are not nested either way
    const other = new TargetingDraft(schema);
    other.toggle("age", 4);
    expect(other.isNarrowerThan(wide)).toBe(false);
  });

  it("describe lists constraints in schema order", () => {
    const draft = new TargetingDraft(schema);
    draft.toggle("device", 1);
    draft.toggle("age", 2);
    expect(draft.describe()).toBe("age in {2}, device in {1}");
  });
});
