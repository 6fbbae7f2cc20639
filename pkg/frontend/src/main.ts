// Panel wiring: persona picker, bubble report pane, command composer, and the
// before/after comparison. One in-flight control request at a time; stale
// responses are dropped by sequence number.

import { ApiError, ServiceClient } from "./api.js";
import {
  ALPHA_GRID, BETA_GRID, acceptControlResponse, beginControlRequest,
  draftToCommand, initialState, validateDraft,
} from "./state.js";
import { renderBubbleReport, renderComparison, renderError, renderSlate } from "./render.js";

declare global {
  interface Window { UCRS_SERVICE_URL?: string }
}

const serviceUrl = window.UCRS_SERVICE_URL ?? "http://127.0.0.1:8080";
const client = new ServiceClient(serviceUrl);
const state = initialState();

const personaInput = document.getElementById("persona-input") as HTMLInputElement;
const personaLoad = document.getElementById("persona-load") as HTMLButtonElement;
const reportPane = document.getElementById("report-pane")!;
const baselinePane = document.getElementById("baseline-pane")!;
const comparisonPane = document.getElementById("comparison-pane")!;
const composer = document.getElementById("composer")!;
const typeSelect = document.getElementById("command-type") as HTMLSelectElement;
const targetSelect = document.getElementById("command-target") as HTMLSelectElement;
const alphaSlider = document.getElementById("alpha-slider") as HTMLInputElement;
const betaSlider = document.getElementById("beta-slider") as HTMLInputElement;
const alphaValue = document.getElementById("alpha-value")!;
const betaValue = document.getElementById("beta-value")!;
const kSelect = document.getElementById("k-targets") as HTMLSelectElement;
const usePrediction = document.getElementById("use-prediction") as HTMLInputElement;
const submitButton = document.getElementById("submit-command") as HTMLButtonElement;
const validationBox = document.getElementById("validation")!;

let categories: string[] = [];
let featureGroups: Record<string, string[]> = {};

alphaSlider.min = "0"; alphaSlider.max = String(ALPHA_GRID.length - 1); alphaSlider.step = "1";
betaSlider.min = "0"; betaSlider.max = String(BETA_GRID.length - 1); betaSlider.step = "1";

function currentAlpha(): number { return ALPHA_GRID[Number(alphaSlider.value)]; }
function currentBeta(): number { return BETA_GRID[Number(betaSlider.value)]; }

function refreshTargets(): void {
  const kind = typeSelect.value;
  targetSelect.innerHTML = "";
  let options: string[] = [];
  if (kind === "item_fine") {
    options = categories;
  } else if (kind === "user_fine") {
    options = Object.entries(featureGroups)
      .flatMap(([group, values]) => values.map((v) => `${group}=${v}`))
      .filter((name) => !state.ownedFeatures.includes(name));
  } else if (kind === "user_coarse") {
    options = state.ownedFeatures;
  }
  for (const name of options) {
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    targetSelect.append(option);
  }
  targetSelect.disabled = kind === "item_coarse";
  kSelect.disabled = usePrediction.disabled = kind !== "item_coarse";
  betaSlider.disabled = kind === "user_fine" || kind === "user_coarse";
  syncDraft();
}

function syncDraft(): void {
  state.draft = {
    type: typeSelect.value as typeof state.draft.type,
    target: targetSelect.value,
    alpha: currentAlpha(),
    beta: currentBeta(),
    kTargets: Number(kSelect.value),
    usePrediction: usePrediction.checked,
  };
  alphaValue.textContent = state.draft.alpha.toFixed(1);
  betaValue.textContent = state.draft.beta.toFixed(2);
  const problem = validateDraft(state.draft, state.ownedFeatures);
  validationBox.textContent = problem ?? "";
  submitButton.disabled = problem !== null || state.userId === null;
}

async function loadPersona(): Promise<void> {
  const userId = personaInput.value.trim();
  if (!userId) return;
  state.status = "loading";
  reportPane.replaceChildren(document.createTextNode("loading..."));
  try {
    const [report, baseline, features, history] = await Promise.all([
      client.bubbleReport(userId),
      client.recommendations(userId),
      client.userFeatures(),
      client.history(userId),
    ]);
    state.userId = userId;
    state.report = report;
    state.baseline = baseline;
    featureGroups = features.groups;
    categories = report.categories;
    state.ownedFeatures = history.features;
    state.adjusted = null;
    state.status = "idle";
    state.errorMessage = null;
    reportPane.replaceChildren(renderBubbleReport(report));
    baselinePane.replaceChildren(renderSlate(baseline));
    comparisonPane.replaceChildren();
    refreshTargets();
  } catch (error) {
    state.status = "error";
    const message = error instanceof ApiError
      ? `${error.code}: ${error.message}` : String(error);
    reportPane.replaceChildren(renderError(message, loadPersona));
  }
}

async function submitCommand(): Promise<void> {
  if (state.userId === null) return;
  const problem = validateDraft(state.draft, state.ownedFeatures);
  if (problem !== null) {
    validationBox.textContent = problem;
    return;
  }
  const seq = beginControlRequest(state);
  submitButton.disabled = true;
  try {
    const response = await client.applyControl(state.userId, draftToCommand(state.draft));
    if (acceptControlResponse(state, seq, response)) {
      comparisonPane.replaceChildren(renderComparison(response));
    }
  } catch (error) {
    if (error instanceof ApiError && error.status === 422) {
      validationBox.textContent = `${error.code}: ${error.message}`;
    } else {
      comparisonPane.replaceChildren(renderError(String(error), submitCommand));
    }
  } finally {
    submitButton.disabled = false;
    syncDraft();
  }
}

personaLoad.addEventListener("click", () => void loadPersona());
personaInput.addEventListener("keydown", (e) => {
  if (e.key === "Enter") void loadPersona();
});
typeSelect.addEventListener("change", refreshTargets);
targetSelect.addEventListener("change", syncDraft);
alphaSlider.addEventListener("input", syncDraft);
betaSlider.addEventListener("input", syncDraft);
kSelect.addEventListener("change", syncDraft);
usePrediction.addEventListener("change", syncDraft);
submitButton.addEventListener("click", () => void submitCommand());

composer.classList.remove("hidden");
refreshTargets();
