// Panel state: current persona, command draft, latest payloads, and the
// request sequencing that discards stale responses.

import type {
  BubbleReportPayload, CommandPayload, CommandType, ControlResponse, SlatePayload,
} from "./api.js";

// the sliders step through exactly the studied control grids
export const ALPHA_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
export const BETA_GRID = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1];

export interface CommandDraft {
  type: CommandType;
  target: string;
  alpha: number;
  beta: number;
  kTargets: number;
  usePrediction: boolean;
}

export interface PanelState {
  userId: string | null;
  ownedFeatures: string[];          // "group=value" names the persona holds
  draft: CommandDraft;
  baseline: SlatePayload | null;
  adjusted: ControlResponse | null; // last successfully applied command
  report: BubbleReportPayload | null;
  status: "idle" | "loading" | "error";
  errorMessage: string | null;
  requestSeq: number;               // last issued control request
  renderedSeq: number;              // last response actually rendered
}

export function initialState(): PanelState {
  return {
    userId: null,
    ownedFeatures: [],
    draft: {
      type: "item_coarse", target: "", alpha: 0.1, beta: 0.05,
      kTargets: 3, usePrediction: true,
    },
    baseline: null,
    adjusted: null,
    report: null,
    status: "idle",
    errorMessage: null,
    requestSeq: 0,
    renderedSeq: 0,
  };
}

/** Client-side mirror of the service's command preconditions. Returns a
 * human-readable problem or null when the draft is sendable. */
export function validateDraft(draft: CommandDraft, ownedFeatures: string[]): string | null {
  if (draft.alpha < 0 || draft.alpha > 1) return "alpha must be within [0, 1]";
  if (draft.type === "user_fine") {
    if (!draft.target) return "pick a target user group";
    if (ownedFeatures.includes(draft.target)) {
      return "target must be a group you are not in";
    }
  }
  if (draft.type === "user_coarse") {
    if (!draft.target) return "pick one of your own groups";
    if (!ownedFeatures.includes(draft.target)) {
      return "you can only escape a group you are in";
    }
  }
  if (draft.type === "item_fine" && !draft.target) return "pick a target category";
  if (draft.type === "item_fine" || draft.type === "item_coarse") {
    if (draft.beta < 0 || draft.beta > 1) return "beta must be within [0, 1]";
  }
  if (draft.type === "item_coarse" && (draft.kTargets < 1 || draft.kTargets > 5)) {
    return "predicted-target count must be 1..5";
  }
  return null;
}

export function draftToCommand(draft: CommandDraft): CommandPayload {
  const payload: CommandPayload = { type: draft.type, alpha: draft.alpha };
  if (draft.type === "user_fine" || draft.type === "user_coarse" || draft.type === "item_fine") {
    payload.target = draft.target;
  }
  if (draft.type === "item_fine" || draft.type === "item_coarse") {
    payload.beta = draft.beta;
  }
  if (draft.type === "item_coarse") {
    payload.k_targets = draft.kTargets;
    payload.use_prediction = draft.usePrediction;
  }
  return payload;
}

/** Issue a new control request: bump the sequence and return its number. */
export function beginControlRequest(state: PanelState): number {
  state.requestSeq += 1;
  return state.requestSeq;
}

/** Accept a response only if nothing newer was issued; stale ones are dropped. */
export function acceptControlResponse(
  state: PanelState, seq: number, response: ControlResponse,
): boolean {
  if (seq < state.requestSeq || seq <= state.renderedSeq) {
    return false;
  }
  state.renderedSeq = seq;
  state.adjusted = response;
  return true;
}
