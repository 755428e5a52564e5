/** Thin typed client for the harmonization job service HTTP endpoints.
 *
 * Every call goes through an injectable fetch so tests can assert the
 * exact requests without a live server. Server-side failures carry a
 * {code, message} body; they surface here as ApiError.
 */

import type {
  DecisionRequest,
  JobRecord,
  ApiErrorBody,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(status: number, body: ApiErrorBody) {
    super(body.message);
    this.name = "ApiError";
    this.status = status;
    this.code = body.code;
  }
}

export interface SubmitResult {
  job_id: string;
  status: string;
}

function joinUrl(base: string, path: string): string {
  return `${base.replace(/\/+$/, "")}${path}`;
}

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) {
    return;
  }
  let body: ApiErrorBody = {
    code: "HTTP_ERROR",
    message: `request failed with status ${response.status}`,
  };
  try {
    const parsed = (await response.json()) as Partial<ApiErrorBody>;
    if (typeof parsed.code === "string" && typeof parsed.message === "string") {
      body = { code: parsed.code, message: parsed.message };
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  throw new ApiError(response.status, body);
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(base: string, fetchImpl?: FetchLike) {
    this.base = base.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => globalThis.fetch(url, init));
  }

  /** Upload a composite and its foreground mask, starting a new run.
   * overrides is merged into the run configuration server-side. */
  async submitCase(
    image: Blob,
    mask: Blob,
    overrides: Record<string, unknown> = {},
  ): Promise<SubmitResult> {
    const form = new FormData();
    form.append("image", image, "image.png");
    form.append("mask", mask, "mask.png");
    form.append("config", JSON.stringify(overrides));
    const response = await this.fetchImpl(joinUrl(this.base, "/jobs"), {
      method: "POST",
      body: form,
    });
    await raiseForStatus(response);
    return (await response.json()) as SubmitResult;
  }

  async listJobs(): Promise<JobRecord[]> {
    const response = await this.fetchImpl(joinUrl(this.base, "/jobs"));
    await raiseForStatus(response);
    const body = (await response.json()) as { jobs: JobRecord[] };
    return body.jobs;
  }

  async getJob(jobId: string): Promise<JobRecord> {
    const response = await this.fetchImpl(
      joinUrl(this.base, `/jobs/${encodeURIComponent(jobId)}`),
    );
    await raiseForStatus(response);
    return (await response.json()) as JobRecord;
  }

  /** Answer a paused run: continue, regenerate (optionally with an
   * edited description), or conclude. 409 means the run is not paused. */
  async postDecision(
    jobId: string,
    decision: DecisionRequest,
  ): Promise<JobRecord> {
    const response = await this.fetchImpl(
      joinUrl(this.base, `/jobs/${encodeURIComponent(jobId)}/decision`),
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(decision),
      },
    );
    await raiseForStatus(response);
    return (await response.json()) as JobRecord;
  }

  async cancelJob(jobId: string): Promise<JobRecord> {
    const response = await this.fetchImpl(
      joinUrl(this.base, `/jobs/${encodeURIComponent(jobId)}/cancel`),
      { method: "POST" },
    );
    await raiseForStatus(response);
    return (await response.json()) as JobRecord;
  }
}

/** URL of a run artifact: the run record ("run"), an iteration image
 * ("iteration", index), a fitted color cube ("lut", index), or an
 * attention map ("attention", "<index>/<name>"). */
export function artifactUrl(
  base: string,
  jobId: string,
  kind: "run" | "iteration" | "lut" | "attention",
  rest = "",
): string {
  const root = base.replace(/\/+$/, "");
  const leaf = kind === "run" && rest === "" ? "json" : rest;
  return `${root}/jobs/${encodeURIComponent(jobId)}/artifacts/${kind}/${leaf}`;
}
