/**
 * Typed HTTP client for the segmentation service.
 *
 * Each method covers one endpoint and resolves with the parsed response
 * body. Non-2xx responses reject with ApiError carrying the HTTP status
 * and the server's {detail} message, so callers can branch on the 404s
 * and 409s the review and deployment flows are specified to produce.
 *
 * The fetch implementation is injectable so tests can run the client
 * against an in-memory stand-in of the service.
 */

import type { MaskPayload } from "./mask.js";
import type { Palette } from "./palette.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export type PredictionStatus = "pending_review" | "qualified" | "unqualified" | "enrolled";

export type TrainingState = "idle" | "training" | "completed" | "failed";

export interface PredictionItem {
  id: string;
  terminal_id: string;
  digest: string;
  status: PredictionStatus;
  created_at: number;
  /** Base64 PNG exactly as the acquisition terminal uploaded it. */
  image: string;
  /** Class indices predicted by the serving weights. */
  mask: MaskPayload;
}

export interface IngestResult {
  prediction_id: string;
  digest: string;
}

export interface VerdictRequest {
  decision: "qualified" | "unqualified";
  corrected_mask?: MaskPayload;
  reviewer?: string;
}

export interface VerdictResult {
  id: string;
  status: PredictionStatus;
  history: string[];
  digest: string;
}

export interface TrainingRequest {
  epochs?: number;
  batch_size?: number;
  lr?: number;
  seed?: number;
  cold_start?: boolean;
}

export interface TrainingAccepted {
  status: "accepted";
  dataset_version: number;
  epochs: number;
}

export interface TrainingStatus {
  state: TrainingState;
  progress: number;
  /** Present only while state is "training". */
  epochs_done?: number;
  /** Candidate checkpoint digest, present once a run completed. */
  digest?: string;
  dataset_version?: number;
  /** Present only when state is "failed". */
  error?: string;
}

export interface SwapResult {
  digest: string;
  previous: string;
}

export interface ModelInfo {
  digest: string;
  config: Record<string, unknown>;
  params: number;
  flops: number;
}

export interface DatasetStats {
  version: number;
  size: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

export interface Client {
  ingestImage(terminalId: string, imageBase64: string): Promise<IngestResult>;
  listPredictions(status?: PredictionStatus): Promise<PredictionItem[]>;
  submitVerdict(predictionId: string, verdict: VerdictRequest): Promise<VerdictResult>;
  startTraining(request?: TrainingRequest): Promise<TrainingAccepted>;
  trainingStatus(): Promise<TrainingStatus>;
  swapWeights(): Promise<SwapResult>;
  modelInfo(): Promise<ModelInfo>;
  datasetStats(): Promise<DatasetStats>;
  palette(): Promise<Palette>;
}

export function createClient(baseUrl: string, fetchImpl?: FetchLike): Client {
  const doFetch: FetchLike = fetchImpl ?? ((url, init) => fetch(url, init));

  async function request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const response = await doFetch(`${baseUrl}${path}`, init);
    if (!response.ok) {
      throw new ApiError(response.status, await extractDetail(response));
    }
    return (await response.json()) as T;
  }

  return {
    ingestImage: (terminalId, imageBase64) =>
      request("POST", `/v1/terminals/${encodeURIComponent(terminalId)}/images`, {
        image: imageBase64,
      }),
    listPredictions: async (status) => {
      const query = status === undefined ? "" : `?status=${status}`;
      const body = await request<{ items: PredictionItem[] }>("GET", `/v1/predictions${query}`);
      return body.items;
    },
    submitVerdict: (predictionId, verdict) =>
      request("POST", `/v1/predictions/${encodeURIComponent(predictionId)}/verdict`, verdict),
    startTraining: (trainingRequest = {}) =>
      request("POST", "/v1/parallel/train", trainingRequest),
    trainingStatus: () => request("GET", "/v1/parallel/status"),
    swapWeights: () => request("POST", "/v1/weights/swap"),
    modelInfo: () => request("GET", "/v1/model/info"),
    datasetStats: () => request("GET", "/v1/dataset/stats"),
    palette: () => request("GET", "/v1/palette"),
  };
}

async function extractDetail(response: Response): Promise<string> {
  try {
    const body: unknown = await response.json();
    if (body !== null && typeof body === "object") {
      const detail = (body as { detail?: unknown }).detail;
      if (typeof detail === "string") {
        return detail;
      }
    }
  } catch {
    // fall through to the generic message
  }
  return `request failed with HTTP ${response.status}`;
}
