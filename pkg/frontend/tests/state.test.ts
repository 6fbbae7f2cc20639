// Command-draft validation mirrors the service preconditions; stale control
// responses are discarded by sequence number.

import { describe, expect, it } from "vitest";
import type { ControlResponse } from "../src/api.js";
import {
  ALPHA_GRID, BETA_GRID, acceptControlResponse, beginControlRequest,
  draftToCommand, initialState, validateDraft,
} from "../src/state.js";

const owned = ["gender=F", "age=25"];

function draft(overrides: Partial<ReturnType<typeof initialState>["draft"]> = {}) {
  return { ...initialState().draft, ...overrides };
}

describe("slider grids", () => {
  it("alpha steps 0.1 over [0, 0.5]", () => {
    expect(ALPHA_GRID).toEqual([0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
  });
  it("beta steps 0.01 over [0, 0.1]", () => {
    expect(BETA_GRID).toHaveLength(11);
    expect(BETA_GRID[0]).toBe(0);
    expect(BETA_GRID[10]).toBe(0.1);
  });
});

describe("draft validation", () => {
  it("fine user control rejects an owned target", () => {
    const problem = validateDraft(
      draft({ type: "user_fine", target: "gender=F" }), owned,
    );
    expect(problem).toMatch(/not in/);
  });

  it("fine user control accepts an unowned target", () => {
    expect(validateDraft(draft({ type: "user_fine", target: "gender=M" }), owned)).toBeNull();
  });

  it("coarse user control requires an owned target", () => {
    expect(validateDraft(draft({ type: "user_coarse", target: "gender=M" }), owned))
      .toMatch(/only escape/);
    expect(validateDraft(draft({ type: "user_coarse", target: "age=25" }), owned)).toBeNull();
  });

  it("item fine needs a target category", () => {
    expect(validateDraft(draft({ type: "item_fine", target: "" }), owned)).not.toBeNull();
  });

  it("ranges enforced", () => {
    expect(validateDraft(draft({ alpha: 1.5 }), owned)).toMatch(/alpha/);
    expect(validateDraft(draft({ type: "item_coarse", kTargets: 9 }), owned)).toMatch(/1\.\.5/);
  });
});

describe("command serialization", () => {
  it("emits the documented JSON shape for each type", () => {
    expect(draftToCommand(draft({ type: "item_fine", target: "drama", alpha: 0.2, beta: 0.05 })))
      .toEqual({ type: "item_fine", target: "drama", alpha: 0.2, beta: 0.05 });
    expect(draftToCommand(draft({
      type: "item_coarse", alpha: 0.1, beta: 0.03, kTargets: 2, usePrediction: true,
    }))).toEqual({
      type: "item_coarse", alpha: 0.1, beta: 0.03, k_targets: 2, use_prediction: true,
    });
    expect(draftToCommand(draft({ type: "user_coarse", target: "age=25", alpha: 0.3 })))
      .toEqual({ type: "user_coarse", target: "age=25", alpha: 0.3 });
  });
});

describe("response sequencing", () => {
  const response = {} as ControlResponse;

  it("accepts the only in-flight response", () => {
    const state = initialState();
    const seq = beginControlRequest(state);
    expect(acceptControlResponse(state, seq, response)).toBe(true);
  });

  it("drops a stale response once a newer request exists", () => {
    const state = initialState();
    const first = beginControlRequest(state);
    const second = beginControlRequest(state);
    expect(acceptControlResponse(state, second, response)).toBe(true);
    expect(acceptControlResponse(state, first, response)).toBe(false);
  });

  it("out-of-order arrivals keep only the latest", () => {
    const state = initialState();
    const a = beginControlRequest(state);
    const b = beginControlRequest(state);
    const c = beginControlRequest(state);
    expect(acceptControlResponse(state, c, response)).toBe(true);
    expect(acceptControlResponse(state, b, response)).toBe(false);
    expect(acceptControlResponse(state, a, response)).toBe(false);
  });
});
