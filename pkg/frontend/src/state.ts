/**
 * Client-side store for the review console: the pending queue, the
 * current selection, and the dashboard readings. Pure data plus
 * transition helpers, so the polling loop and the DOM wiring stay thin
 * and the gating rules stay testable.
 */

import type {
  DatasetStats,
  ModelInfo,
  PredictionItem,
  TrainingStatus,
} from "./api.js";

export interface AppState {
  queue: PredictionItem[];
  selectedId: string | null;
  training: TrainingStatus;
  stats: DatasetStats;
  model: ModelInfo | null;
}

export function initialState(): AppState {
  return {
    queue: [],
    selectedId: null,
    training: { state: "idle", progress: 0 },
    stats: { version: 0, size: 0 },
    model: null,
  };
}

/** Replace the queue, keeping the current selection when it survived. */
export function withQueue(state: AppState, items: PredictionItem[]): AppState {
  const kept = items.some((item) => item.id === state.selectedId);
  const selectedId = kept ? state.selectedId : (items[0]?.id ?? null);
  return { ...state, queue: items, selectedId };
}

/** Drop a reviewed item and advance the selection to its neighbour. */
export function withoutPrediction(state: AppState, id: string): AppState {
  const index = state.queue.findIndex((item) => item.id === id);
  if (index < 0) {
    return state;
  }
  const queue = state.queue.filter((item) => item.id !== id);
  let selectedId = state.selectedId;
  if (selectedId === id) {
    selectedId = queue[Math.min(index, queue.length - 1)]?.id ?? null;
  }
  return { ...state, queue, selectedId };
}

export function selectedItem(state: AppState): PredictionItem | null {
  return state.queue.find((item) => item.id === state.selectedId) ?? null;
}

/** The swap endpoint only succeeds once a parallel run has completed. */
export function canSwap(training: TrainingStatus): boolean {
  return training.state === "completed";
}

/** Training can start unless a run is live or nothing is enrolled yet. */
export function canTrain(training: TrainingStatus, stats: DatasetStats): boolean {
  return training.state !== "training" && stats.size > 0;
}

export function shortDigest(digest: string | undefined): string {
  return digest ? digest.slice(0, 12) : "-";
}

/** One-line dashboard summary of the parallel run. */
export function trainingLabel(status: TrainingStatus): string {
  switch (status.state) {
    case "idle":
      return "idle";
    case "training": {
      const percent = `${Math.round(status.progress * 100)}%`;
      const epochs = status.epochs_done !== undefined ? `, epoch ${status.epochs_done}` : "";
      return `training ${percent}${epochs}`;
    }
    case "completed":
      return `completed, candidate ${shortDigest(status.digest)}`;
    case "failed":
      return `failed: ${status.error ?? "unknown error"}`;
  }
}
