// Persona picker wiring against the real index.html shell: panes populate on
// load, refresh on switch, and a failed service shows a retry affordance.

import { readFileSync } from "node:fs";
import { resolve } from "node:path";
import { beforeEach, describe, expect, it, vi } from "vitest";

const html = readFileSync(resolve(process.cwd(), "index.html"), "utf-8");
const body = html.slice(html.indexOf("<body>") + 6, html.indexOf("</body>"));

function payloadsFor(userId: string) {
  return {
    [`/users/${userId}/bubble-report`]: {
      user_id: userId,
      report: { coverage: 2, iso_index: 0.2, mcd: 0.7, severity: 4, window: null },
      history_distribution: [0.7, 0.3],
      recommendation_distribution: [0.9, 0.1],
      categories: ["catA", "catB"],
    },
    [`/users/${userId}/recommendations?k=10`]: {
      user_id: userId,
      items: [{ item_id: `${userId}-top`, categories: ["catA"], score: 0.9 }],
      provenance: {}, truncated: false,
    },
    "/catalog/user-features": { groups: { gender: ["F", "M"], age: ["18", "25"] } },
    [`/users/${userId}/history`]: {
      user_id: userId, events: [], features: ["gender=F", "age=18"],
    },
  } as Record<string, unknown>;
}

function stubFetch(responses: Record<string, unknown>, fail = false) {
  return vi.fn(async (url: string) => {
    if (fail) throw new Error("connection refused");
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const payload = responses[path];
    if (payload === undefined) {
      return {
        ok: false, status: 404,
        json: async () => ({ code: "unknown", message: `no stub for ${path}` }),
      };
    }
    return { ok: true, status: 200, json: async () => payload };
  });
}

async function boot(fetchImpl: unknown) {
  document.body.innerHTML = body;
  vi.stubGlobal("fetch", fetchImpl);
  vi.resetModules();
  await import("../src/main.js");
}

function click(id: string) {
  (document.getElementById(id) as HTMLButtonElement).click();
}

async function settle() {
  await new Promise((resolve) => setTimeout(resolve, 0));
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe("persona picker", () => {
  beforeEach(() => vi.unstubAllGlobals());

  it("populates report, baseline, and composer panes for a valid user", async () => {
    await boot(stubFetch(payloadsFor("u1")));
    (document.getElementById("persona-input") as HTMLInputElement).value = "u1";
    click("persona-load");
    await settle();
    expect(document.querySelector('[data-testid="severity-badge"]')).not.toBeNull();
    expect(document.querySelector('[data-testid="gauge-mcd"]')?.textContent).toBe("0.7000");
    const baseline = document.getElementById("baseline-pane")!;
    expect(baseline.textContent).toContain("u1-top");
    expect((document.getElementById("submit-command") as HTMLButtonElement).disabled)
      .toBe(false);
  });

  it("switching personas refreshes every pane without stale data", async () => {
    const responses = { ...payloadsFor("u1"), ...payloadsFor("u2") };
    await boot(stubFetch(responses));
    const input = document.getElementById("persona-input") as HTMLInputElement;
    input.value = "u1";
    click("persona-load");
    await settle();
    input.value = "u2";
    click("persona-load");
    await settle();
    const baseline = document.getElementById("baseline-pane")!;
    expect(baseline.textContent).toContain("u2-top");
    expect(baseline.textContent).not.toContain("u1-top");
  });

  it("service failure shows a retry affordance", async () => {
    await boot(stubFetch({}, true));
    (document.getElementById("persona-input") as HTMLInputElement).value = "u1";
    click("persona-load");
    await settle();
    const box = document.querySelector('[data-testid="error-box"]');
    expect(box).not.toBeNull();
    expect(box!.querySelector("button.retry")).not.toBeNull();
  });

  it("coarse user-control target options come from the persona's own features", async () => {
    await boot(stubFetch(payloadsFor("u1")));
    (document.getElementById("persona-input") as HTMLInputElement).value = "u1";
    click("persona-load");
    await settle();
    const typeSelect = document.getElementById("command-type") as HTMLSelectElement;
    typeSelect.value = "user_coarse";
    typeSelect.dispatchEvent(new Event("change"));
    const options = Array.from(
      (document.getElementById("command-target") as HTMLSelectElement).options,
    ).map((o) => o.value);
    expect(options).toEqual(["gender=F", "age=18"]);
    typeSelect.value = "user_fine";
    typeSelect.dispatchEvent(new Event("change"));
    const fineOptions = Array.from(
      (document.getElementById("command-target") as HTMLSelectElement).options,
    ).map((o) => o.value);
    expect(fineOptions).toEqual(["gender=M", "age=25"]);
  });
});
