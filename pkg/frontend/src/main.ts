/**
 * DOM wiring for the review console. Everything with logic worth
 * testing lives in the sibling modules; this file only connects them
 * to the document: queue list, editing canvas, verdict buttons, and
 * the dashboard poll that gates the train and swap controls.
 */

import { ApiError, createClient, type PredictionItem } from "./api.js";
import { MaskEditor } from "./editor.js";
import { decodeMask, encodeMask, type Mask } from "./mask.js";
import { composeOverlay } from "./overlay.js";
import { DEFAULT_PALETTE, type Palette } from "./palette.js";
import {
  canSwap,
  canTrain,
  initialState,
  selectedItem,
  shortDigest,
  trainingLabel,
  withQueue,
  withoutPrediction,
  type AppState,
} from "./state.js";

const POLL_MS = 2000;

const client = createClient("");

let state: AppState = initialState();
let palette: Palette = DEFAULT_PALETTE;
let editor: MaskEditor | null = null;
let photo: Uint8ClampedArray | null = null;
let activeClass = 0;
let tool: "brush" | "fill" = "brush";
let painting = false;
let submitting = false;

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (found === null) {
    throw new Error(`document is missing #${id}`);
  }
  return found as T;
}

const queueList = element<HTMLUListElement>("queue");
const viewer = element<HTMLCanvasElement>("viewer");
const viewerNote = element<HTMLParagraphElement>("viewer-note");
const classRow = element<HTMLDivElement>("class-row");
const radiusInput = element<HTMLInputElement>("brush-radius");
const alphaInput = element<HTMLInputElement>("overlay-alpha");
const toolSelect = element<HTMLSelectElement>("tool");
const undoButton = element<HTMLButtonElement>("undo");
const qualifiedButton = element<HTMLButtonElement>("verdict-qualified");
const unqualifiedButton = element<HTMLButtonElement>("verdict-unqualified");
const reviewerInput = element<HTMLInputElement>("reviewer");
const trainButton = element<HTMLButtonElement>("train");
const swapButton = element<HTMLButtonElement>("swap");
const trainingLine = element<HTMLSpanElement>("training-line");
const datasetLine = element<HTMLSpanElement>("dataset-line");
const modelLine = element<HTMLSpanElement>("model-line");
const statusLine = element<HTMLParagraphElement>("status-line");

function report(message: string): void {
  statusLine.textContent = message;
}

function reportError(error: unknown): void {
  if (error instanceof ApiError) {
    report(`service: ${error.message} (HTTP ${error.status})`);
  } else {
    report(String(error));
  }
}

// -- queue ------------------------------------------------------------------

function renderQueue(): void {
  queueList.replaceChildren();
  for (const item of state.queue) {
    const entry = document.createElement("li");
    entry.textContent = `${item.terminal_id}  ${shortDigest(item.id)}`;
    entry.className = item.id === state.selectedId ? "selected" : "";
    entry.addEventListener("click", () => {
      state = { ...state, selectedId: item.id };
      renderQueue();
      void loadSelection();
    });
    queueList.append(entry);
  }
  const verdictsReady = state.selectedId !== null && !submitting;
  qualifiedButton.disabled = !verdictsReady;
  unqualifiedButton.disabled = !verdictsReady;
}

async function refreshQueue(): Promise<void> {
  const before = state.selectedId;
  const items = await client.listPredictions("pending_review");
  state = withQueue(state, items);
  renderQueue();
  if (state.selectedId !== before) {
    await loadSelection();
  }
}

// -- viewer -----------------------------------------------------------------

async function decodePhoto(item: PredictionItem, mask: Mask): Promise<Uint8ClampedArray> {
  const image = new Image();
  image.src = `data:image/png;base64,${item.image}`;
  await image.decode();
  const scratch = document.createElement("canvas");
  scratch.width = mask.width;
  scratch.height = mask.height;
  const context = scratch.getContext("2d");
  if (context === null) {
    throw new Error("canvas 2d context is unavailable");
  }
  context.drawImage(image, 0, 0, mask.width, mask.height);
  return context.getImageData(0, 0, mask.width, mask.height).data;
}

function repaint(): void {
  if (editor === null || photo === null) {
    return;
  }
  const mask = editor.mask;
  const alpha = Number(alphaInput.value);
  const blended = composeOverlay(photo, mask, palette, alpha);
  const context = viewer.getContext("2d");
  if (context === null) {
    return;
  }
  context.putImageData(new ImageData(blended, mask.width, mask.height), 0, 0);
}

async function loadSelection(): Promise<void> {
  const item = selectedItem(state);
  if (item === null) {
    editor = null;
    photo = null;
    viewer.getContext("2d")?.clearRect(0, 0, viewer.width, viewer.height);
    viewerNote.textContent = "nothing pending review";
    return;
  }
  const mask = decodeMask(item.mask);
  editor = new MaskEditor(mask);
  viewer.width = mask.width;
  viewer.height = mask.height;
  try {
    photo = await decodePhoto(item, mask);
  } catch {
    // keep reviewing on a neutral background if the PNG will not decode
    photo = new Uint8ClampedArray(mask.width * mask.height * 4).fill(64);
  }
  const stale = state.model !== null && item.digest !== state.model.digest;
  viewerNote.textContent =
    `${item.terminal_id}, predicted by ${shortDigest(item.digest)}` +
    (stale ? " (retired weights)" : "");
  repaint();
}

function maskCoords(event: PointerEvent): { x: number; y: number } | null {
  if (editor === null) {
    return null;
  }
  const rect = viewer.getBoundingClientRect();
  if (rect.width === 0 || rect.height === 0) {
    return null;
  }
  return {
    x: ((event.clientX - rect.left) / rect.width) * editor.mask.width,
    y: ((event.clientY - rect.top) / rect.height) * editor.mask.height,
  };
}

viewer.addEventListener("pointerdown", (event) => {
  if (editor === null) {
    return;
  }
  const at = maskCoords(event);
  if (at === null) {
    return;
  }
  if (tool === "fill") {
    editor.fill(Math.floor(at.x), Math.floor(at.y), activeClass);
    repaint();
    return;
  }
  painting = true;
  viewer.setPointerCapture(event.pointerId);
  editor.beginStroke();
  editor.brush(at.x, at.y, Number(radiusInput.value), activeClass);
  repaint();
});

viewer.addEventListener("pointermove", (event) => {
  if (!painting || editor === null) {
    return;
  }
  const at = maskCoords(event);
  if (at !== null) {
    editor.brush(at.x, at.y, Number(radiusInput.value), activeClass);
    repaint();
  }
});

viewer.addEventListener("pointerup", () => {
  if (painting) {
    painting = false;
    editor?.endStroke();
  }
});

undoButton.addEventListener("click", () => {
  if (editor?.undo()) {
    repaint();
  }
});

alphaInput.addEventListener("input", repaint);
toolSelect.addEventListener("change", () => {
  tool = toolSelect.value === "fill" ? "fill" : "brush";
});

// -- palette ----------------------------------------------------------------

function renderClassRow(): void {
  classRow.replaceChildren();
  for (const entry of palette.classes) {
    const button = document.createElement("button");
    button.type = "button";
    button.textContent = entry.name;
    button.className = entry.index === activeClass ? "swatch selected" : "swatch";
    const [r, g, b] = entry.color;
    button.style.setProperty("--swatch", `rgb(${r} ${g} ${b})`);
    button.addEventListener("click", () => {
      activeClass = entry.index;
      renderClassRow();
    });
    classRow.append(button);
  }
}

// -- verdicts ---------------------------------------------------------------

async function submit(decision: "qualified" | "unqualified"): Promise<void> {
  const item = selectedItem(state);
  if (item === null || submitting) {
    return;
  }
  submitting = true;
  renderQueue();
  try {
    const reviewer = reviewerInput.value.trim() || "expert";
    const result = await client.submitVerdict(
      item.id,
      decision === "qualified"
        ? { decision, reviewer }
        : { decision, reviewer, corrected_mask: encodeMask(editor!.mask) },
    );
    state = withoutPrediction(state, item.id);
    report(`${shortDigest(item.id)} -> ${result.status}`);
    await refreshDashboard();
  } catch (error) {
    reportError(error);
    await refreshQueue().catch(() => undefined);
  } finally {
    submitting = false;
    renderQueue();
    await loadSelection();
  }
}

qualifiedButton.addEventListener("click", () => void submit("qualified"));
unqualifiedButton.addEventListener("click", () => void submit("unqualified"));

// -- dashboard --------------------------------------------------------------

async function refreshDashboard(): Promise<void> {
  const [training, stats, model] = await Promise.all([
    client.trainingStatus(),
    client.datasetStats(),
    client.modelInfo(),
  ]);
  state = { ...state, training, stats, model };
  trainingLine.textContent = trainingLabel(training);
  datasetLine.textContent = `${stats.size} enrolled, version ${stats.version}`;
  modelLine.textContent =
    `serving ${shortDigest(model.digest)}, ` +
    `${(model.params / 1e6).toFixed(2)}M params, ` +
    `${(model.flops / 1e9).toFixed(2)} GFLOPs`;
  trainButton.disabled = !canTrain(training, stats);
  swapButton.disabled = !canSwap(training);
}

trainButton.addEventListener("click", () => {
  void (async () => {
    try {
      const accepted = await client.startTraining({});
      report(`training accepted on dataset version ${accepted.dataset_version}`);
      await refreshDashboard();
    } catch (error) {
      reportError(error);
    }
  })();
});

swapButton.addEventListener("click", () => {
  void (async () => {
    try {
      const swapped = await client.swapWeights();
      report(`deployed ${shortDigest(swapped.digest)} (was ${shortDigest(swapped.previous)})`);
      await refreshDashboard();
      await refreshQueue();
    } catch (error) {
      reportError(error);
    }
  })();
});

// -- bootstrap --------------------------------------------------------------

async function poll(): Promise<void> {
  try {
    await refreshDashboard();
    await refreshQueue();
    if (statusLine.textContent?.startsWith("service unreachable")) {
      report("");
    }
  } catch (error) {
    if (error instanceof ApiError) {
      reportError(error);
    } else {
      report("service unreachable, retrying");
    }
  }
}

void (async () => {
  try {
    palette = await client.palette();
  } catch {
    // the bundled legend matches the server default
  }
  renderClassRow();
  await poll();
  await loadSelection();
  setInterval(() => void poll(), POLL_MS);
})();
