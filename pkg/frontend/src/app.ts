/** Browser wiring for the harmonization studio.
 *
 * Everything stateful lives in the pure modules: the run model is a
 * fold over the event stream (reducer.ts), the stream client handles
 * resume (sse.ts), the mask is a plain byte grid (mask.ts). This file
 * only moves data between those modules and the DOM.
 */

import { ApiClient, ApiError, artifactUrl } from "./api.js";
import {
  clearMask,
  createMask,
  fromPixels,
  paintStroke,
  paintedFraction,
  type MaskGrid,
  toBinaryPixels,
} from "./mask.js";
import {
  initialView,
  reduce,
  type IterationCard,
  type RunView,
} from "./reducer.js";
import { openRunStream, type StreamHandle } from "./sse.js";
import type { DecisionKind, DescriptionTriple } from "./types.js";

interface AppState {
  client: ApiClient;
  base: string;
  view: RunView | null;
  stream: StreamHandle | null;
  mask: MaskGrid | null;
  imageBitmap: ImageBitmap | null;
  brushValue: 0 | 1;
  brushRadius: number;
  lastPointer: { x: number; y: number } | null;
  decisionPending: boolean;
}

const state: AppState = {
  client: new ApiClient(defaultBase()),
  base: defaultBase(),
  view: null,
  stream: null,
  mask: null,
  imageBitmap: null,
  brushValue: 1,
  brushRadius: 12,
  lastPointer: null,
  decisionPending: false,
};

function defaultBase(): string {
  return `${window.location.protocol}//${window.location.host}`;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function setNotice(message: string, isError: boolean): void {
  const bar = byId<HTMLElement>("notice");
  bar.textContent = message;
  bar.className = message === "" ? "notice hidden" : isError ? "notice error" : "notice";
}

// ---------------------------------------------------------------- mask canvas

function canvasContext(canvas: HTMLCanvasElement): CanvasRenderingContext2D {
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    throw new Error("2d canvas is unavailable");
  }
  return ctx;
}

async function loadImageFile(file: File): Promise<void> {
  state.imageBitmap = await createImageBitmap(file);
  const image = byId<HTMLCanvasElement>("image-canvas");
  const overlay = byId<HTMLCanvasElement>("mask-canvas");
  image.width = state.imageBitmap.width;
  image.height = state.imageBitmap.height;
  overlay.width = state.imageBitmap.width;
  overlay.height = state.imageBitmap.height;
  canvasContext(image).drawImage(state.imageBitmap, 0, 0);
  state.mask = createMask(state.imageBitmap.width, state.imageBitmap.height);
  drawMaskOverlay();
  byId<HTMLElement>("painter").classList.remove("hidden");
}

async function loadMaskFile(file: File): Promise<void> {
  if (!state.mask) {
    setNotice("load the composite image first", true);
    return;
  }
  const bitmap = await createImageBitmap(file);
  if (bitmap.width !== state.mask.width || bitmap.height !== state.mask.height) {
    setNotice(
      `mask is ${bitmap.width}x${bitmap.height} but the image is ` +
        `${state.mask.width}x${state.mask.height}`,
      true,
    );
    return;
  }
  const scratch = document.createElement("canvas");
  scratch.width = bitmap.width;
  scratch.height = bitmap.height;
  const ctx = canvasContext(scratch);
  ctx.drawImage(bitmap, 0, 0);
  const pixels = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  state.mask = fromPixels(bitmap.width, bitmap.height, pixels);
  drawMaskOverlay();
}

function drawMaskOverlay(): void {
  if (!state.mask) {
    return;
  }
  const overlay = byId<HTMLCanvasElement>("mask-canvas");
  const ctx = canvasContext(overlay);
  const pixels = ctx.createImageData(state.mask.width, state.mask.height);
  for (let i = 0; i < state.mask.data.length; i += 1) {
    if (state.mask.data[i] !== 0) {
      pixels.data[i * 4] = 255;
      pixels.data[i * 4 + 1] = 64;
      pixels.data[i * 4 + 2] = 64;
      pixels.data[i * 4 + 3] = 140;
    }
  }
  ctx.putImageData(pixels, 0, 0);
  const pct = (paintedFraction(state.mask) * 100).toFixed(1);
  byId<HTMLElement>("mask-coverage").textContent = `${pct}% painted`;
}

function overlayCoords(evt: PointerEvent): { x: number; y: number } {
  const overlay = byId<HTMLCanvasElement>("mask-canvas");
  const rect = overlay.getBoundingClientRect();
  return {
    x: ((evt.clientX - rect.left) / rect.width) * overlay.width,
    y: ((evt.clientY - rect.top) / rect.height) * overlay.height,
  };
}

function bindPainter(): void {
  const overlay = byId<HTMLCanvasElement>("mask-canvas");
  overlay.addEventListener("pointerdown", (evt) => {
    if (!state.mask) {
      return;
    }
    overlay.setPointerCapture(evt.pointerId);
    const p = overlayCoords(evt);
    paintStroke(state.mask, p.x, p.y, p.x, p.y, state.brushRadius, state.brushValue);
    state.lastPointer = p;
    drawMaskOverlay();
  });
  overlay.addEventListener("pointermove", (evt) => {
    if (!state.mask || !state.lastPointer) {
      return;
    }
    const p = overlayCoords(evt);
    paintStroke(
      state.mask,
      state.lastPointer.x,
      state.lastPointer.y,
      p.x,
      p.y,
      state.brushRadius,
      state.brushValue,
    );
    state.lastPointer = p;
    drawMaskOverlay();
  });
  const lift = () => {
    state.lastPointer = null;
  };
  overlay.addEventListener("pointerup", lift);
  overlay.addEventListener("pointercancel", lift);
  byId<HTMLInputElement>("brush-radius").addEventListener("input", (evt) => {
    state.brushRadius = Number((evt.target as HTMLInputElement).value);
  });
  byId<HTMLElement>("brush-paint").addEventListener("click", () => {
    state.brushValue = 1;
    byId<HTMLElement>("brush-paint").classList.add("active");
    byId<HTMLElement>("brush-erase").classList.remove("active");
  });
  byId<HTMLElement>("brush-erase").addEventListener("click", () => {
    state.brushValue = 0;
    byId<HTMLElement>("brush-erase").classList.add("active");
    byId<HTMLElement>("brush-paint").classList.remove("active");
  });
  byId<HTMLElement>("brush-clear").addEventListener("click", () => {
    if (state.mask) {
      clearMask(state.mask);
      drawMaskOverlay();
    }
  });
}

function maskToBlob(grid: MaskGrid): Promise<Blob> {
  const scratch = document.createElement("canvas");
  scratch.width = grid.width;
  scratch.height = grid.height;
  const ctx = canvasContext(scratch);
  ctx.putImageData(new ImageData(toBinaryPixels(grid), grid.width, grid.height), 0, 0);
  return new Promise((resolve, reject) => {
    scratch.toBlob((blob) => {
      if (blob) {
        resolve(blob);
      } else {
        reject(new Error("mask export failed"));
      }
    }, "image/png");
  });
}

// ------------------------------------------------------------------ submitting

function readConfigOverrides(): Record<string, unknown> {
  const overrides: Record<string, unknown> = {
    sampler: { steps: Number(byId<HTMLInputElement>("cfg-steps").value) },
    k_candidates: Number(byId<HTMLInputElement>("cfg-candidates").value),
    decisions: {
      max_iterations: Number(byId<HTMLInputElement>("cfg-iterations").value),
    },
    interactive: byId<HTMLInputElement>("cfg-interactive").checked,
  };
  const seed = byId<HTMLInputElement>("cfg-seed").value.trim();
  if (seed !== "") {
    overrides["seed"] = Number(seed);
  }
  return overrides;
}

async function submitCase(): Promise<void> {
  const imageInput = byId<HTMLInputElement>("image-file");
  const imageFile = imageInput.files?.[0];
  if (!imageFile) {
    setNotice("choose a composite image first", true);
    return;
  }
  if (!state.mask || paintedFraction(state.mask) === 0) {
    setNotice("paint or upload a foreground mask first", true);
    return;
  }
  setNotice("uploading...", false);
  try {
    const maskBlob = await maskToBlob(state.mask);
    const result = await state.client.submitCase(
      imageFile,
      maskBlob,
      readConfigOverrides(),
    );
    setNotice(`job ${result.job_id} accepted`, false);
    openRun(result.job_id);
  } catch (error) {
    if (error instanceof ApiError) {
      setNotice(`${error.code}: ${error.message}`, true);
    } else {
      setNotice(String(error), true);
    }
  }
}

// ------------------------------------------------------------------- run view

function openRun(jobId: string): void {
  state.stream?.close();
  state.view = initialView(jobId);
  state.decisionPending = false;
  renderRun();
  byId<HTMLElement>("run-panel").classList.remove("hidden");
  state.stream = openRunStream(
    state.base,
    jobId,
    (event) => {
      if (state.view && event.job_id === state.view.jobId) {
        state.view = reduce(state.view, event);
        state.decisionPending = false;
        renderRun();
      }
    },
    { onError: (message) => setNotice(`stream: ${message} (resuming)`, true) },
  );
}

function scoreChart(view: RunView): SVGSVGElement {
  const scored = view.iterations.filter((card) => card.score !== null);
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  svg.setAttribute("viewBox", "0 0 260 90");
  svg.setAttribute("class", "score-chart");
  if (scored.length === 0) {
    return svg;
  }
  const xAt = (i: number) =>
    scored.length === 1 ? 130 : 10 + (240 * i) / (scored.length - 1);
  const yAt = (score: number) => 80 - 70 * score;
  const points = scored
    .map((card, i) => `${xAt(i).toFixed(1)},${yAt(card.score as number).toFixed(1)}`)
    .join(" ");
  const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
  line.setAttribute("points", points);
  line.setAttribute("class", "score-line");
  svg.append(line);
  scored.forEach((card, i) => {
    const dot = document.createElementNS("http://www.w3.org/2000/svg", "circle");
    dot.setAttribute("cx", xAt(i).toFixed(1));
    dot.setAttribute("cy", yAt(card.score as number).toFixed(1));
    dot.setAttribute("r", card.index === view.bestIndex ? "4" : "2.5");
    dot.setAttribute(
      "class",
      card.index === view.bestIndex ? "score-dot best" : "score-dot",
    );
    svg.append(dot);
  });
  return svg;
}

function describeTriple(triple: DescriptionTriple): string {
  return (
    `object: ${triple.object.join(", ")} | ` +
    `foreground: ${triple.foreground.join(", ")} | ` +
    `background: ${triple.background.join(", ")}`
  );
}

function iterationCardNode(view: RunView, card: IterationCard): HTMLElement {
  const jobId = view.jobId;
  const img = el("img", {
    src: artifactUrl(state.base, jobId, "iteration", String(card.index)),
    alt: `iteration ${card.index}`,
    class: "iteration-image",
  });
  const badges: HTMLElement[] = [];
  if (card.index === view.bestIndex) {
    badges.push(el("span", { class: "badge best" }, ["best"]));
  }
  if (card.decision) {
    const label =
      card.decision.kind === "regenerate" && card.decision.revertTo !== null
        ? `${card.decision.kind} from ${card.decision.revertTo}`
        : card.decision.kind;
    badges.push(
      el("span", { class: `badge decision ${card.decision.source}` }, [
        `${label} (${card.decision.source})`,
      ]),
    );
  }
  const scoreText =
    card.score === null ? "scoring..." : `score ${card.score.toFixed(4)}`;
  const links = el("div", { class: "card-links" }, [
    el("a", {
      href: artifactUrl(state.base, jobId, "lut", String(card.index)),
      download: `lut_${card.index}.cube`,
    }, ["LUT .cube"]),
    " ",
    el("a", {
      href: artifactUrl(state.base, jobId, "attention", `${card.index}/final`),
      target: "_blank",
    }, ["attention"]),
  ]);
  const flagged =
    card.flaggedSteps.length > 0
      ? el("div", { class: "flagged" }, [
          `flagged steps: ${card.flaggedSteps.join(", ")}`,
        ])
      : el("div", { class: "flagged" }, []);
  return el("div", { class: "iteration-card" }, [
    el("div", { class: "card-header" }, [`iteration ${card.index}`, ...badges]),
    img,
    el("div", { class: "card-score" }, [scoreText]),
    el("div", { class: "card-description" }, [describeTriple(card.description)]),
    flagged,
    links,
  ]);
}

function tripleEditor(triple: DescriptionTriple | null): HTMLElement {
  const value = (words: string[] | undefined) => (words ?? []).join(", ");
  return el("div", { class: "triple-editor" }, [
    el("label", {}, [
      "object ",
      el("input", { id: "edit-object", value: value(triple?.object) }),
    ]),
    el("label", {}, [
      "foreground ",
      el("input", { id: "edit-foreground", value: value(triple?.foreground) }),
    ]),
    el("label", {}, [
      "background ",
      el("input", { id: "edit-background", value: value(triple?.background) }),
    ]),
  ]);
}

function readEditedTriple(): DescriptionTriple | null {
  const parse = (id: string) =>
    byId<HTMLInputElement>(id)
      .value.split(",")
      .map((word) => word.trim())
      .filter((word) => word !== "");
  const triple = {
    object: parse("edit-object"),
    foreground: parse("edit-foreground"),
    background: parse("edit-background"),
  };
  const current = state.view?.currentDescription;
  const unchanged =
    current &&
    JSON.stringify(triple) ===
      JSON.stringify({
        object: current.object,
        foreground: current.foreground,
        background: current.background,
      });
  return unchanged ? null : triple;
}

async function sendDecision(kind: DecisionKind): Promise<void> {
  if (!state.view || state.decisionPending) {
    return;
  }
  const body: {
    kind: DecisionKind;
    revert_to?: number;
    new_description?: DescriptionTriple;
  } = { kind };
  if (kind === "regenerate") {
    const revert = byId<HTMLInputElement>("revert-to").value.trim();
    if (revert !== "") {
      body.revert_to = Number(revert);
    }
    const edited = readEditedTriple();
    if (edited) {
      body.new_description = edited;
    }
  }
  state.decisionPending = true;
  renderRun();
  try {
    await state.client.postDecision(state.view.jobId, body);
    setNotice(`${kind} sent`, false);
  } catch (error) {
    state.decisionPending = false;
    renderRun();
    if (error instanceof ApiError && error.status === 409) {
      setNotice("run already resumed", true);
    } else if (error instanceof ApiError) {
      setNotice(`${error.code}: ${error.message}`, true);
    } else {
      setNotice(String(error), true);
    }
  }
}

function decisionBanner(view: RunView): HTMLElement {
  if (view.status !== "awaiting_human" || !view.proposal) {
    return el("div", { class: "hidden" });
  }
  const proposal = view.proposal;
  const suggestion =
    proposal.kind === "regenerate" && proposal.revertTo !== null
      ? `evaluator suggests: ${proposal.kind} from iteration ${proposal.revertTo}`
      : `evaluator suggests: ${proposal.kind}`;
  const mkButton = (kind: DecisionKind, label: string) => {
    const attrs: Record<string, string> = { class: `decide ${kind}` };
    if (state.decisionPending) {
      attrs["disabled"] = "disabled";
    }
    const button = el("button", attrs, [label]);
    button.addEventListener("click", () => void sendDecision(kind));
    return button;
  };
  const revertDefault = proposal.revertTo ?? view.bestIndex ?? 0;
  return el("div", { class: "decision-banner" }, [
    el("div", { class: "banner-title" }, ["run paused: your call"]),
    el("div", { class: "banner-suggestion" }, [suggestion]),
    tripleEditor(view.currentDescription),
    el("label", {}, [
      "revert to iteration ",
      el("input", { id: "revert-to", value: String(revertDefault), size: "3" }),
    ]),
    el("div", { class: "banner-buttons" }, [
      mkButton("continue", "Continue"),
      mkButton("regenerate", "Regenerate"),
      mkButton("conclude", "Conclude"),
    ]),
    state.decisionPending
      ? el("div", { class: "pending" }, ["sending decision..."])
      : el("div", { class: "hidden" }),
  ]);
}

function renderRun(): void {
  const view = state.view;
  if (!view) {
    return;
  }
  byId<HTMLElement>("run-title").textContent = `run ${view.jobId}`;
  const chip = byId<HTMLElement>("run-status");
  chip.textContent = view.status;
  chip.className = `status-chip ${view.status}`;
  const chart = byId<HTMLElement>("chart-slot");
  chart.replaceChildren(scoreChart(view));
  const gallery = byId<HTMLElement>("gallery");
  gallery.replaceChildren(
    ...view.iterations.map((card) => iterationCardNode(view, card)),
  );
  byId<HTMLElement>("banner-slot").replaceChildren(decisionBanner(view));
  const final = byId<HTMLElement>("final-slot");
  if (view.status === "concluded" && view.finalImage !== null) {
    final.replaceChildren(
      el("div", { class: "final-panel" }, [
        el("div", { class: "banner-title" }, [
          `concluded: best iteration ${view.bestIndex} ` +
            `(score ${view.bestScore?.toFixed(4) ?? "?"})`,
        ]),
        el("img", {
          src: artifactUrl(state.base, view.jobId, "iteration", String(view.bestIndex)),
          class: "final-image",
          alt: "final harmonized image",
        }),
        el("div", { class: "card-links" }, [
          el("a", {
            href: artifactUrl(state.base, view.jobId, "run"),
            download: "run.json",
          }, ["run record"]),
        ]),
      ]),
    );
  } else if (view.status === "failed") {
    final.replaceChildren(
      el("div", { class: "final-panel error" }, [
        `run failed: ${view.error ?? "unknown"}`,
      ]),
    );
  } else {
    final.replaceChildren();
  }
}

// -------------------------------------------------------------------- wiring

function bindForm(): void {
  byId<HTMLInputElement>("image-file").addEventListener("change", (evt) => {
    const file = (evt.target as HTMLInputElement).files?.[0];
    if (file) {
      void loadImageFile(file);
    }
  });
  byId<HTMLInputElement>("mask-file").addEventListener("change", (evt) => {
    const file = (evt.target as HTMLInputElement).files?.[0];
    if (file) {
      void loadMaskFile(file);
    }
  });
  byId<HTMLElement>("submit-run").addEventListener("click", () => void submitCase());
  byId<HTMLInputElement>("service-base").value = state.base;
  byId<HTMLInputElement>("service-base").addEventListener("change", (evt) => {
    state.base = (evt.target as HTMLInputElement).value.replace(/\/+$/, "");
    state.client = new ApiClient(state.base);
  });
  byId<HTMLElement>("open-job").addEventListener("click", () => {
    const jobId = byId<HTMLInputElement>("job-id").value.trim();
    if (jobId !== "") {
      openRun(jobId);
    }
  });
}

export function main(): void {
  bindForm();
  bindPainter();
}

if (typeof document !== "undefined" && document.getElementById("submit-run")) {
  main();
}
