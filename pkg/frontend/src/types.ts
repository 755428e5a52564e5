/** Wire types of the harmonization job service, mirrored field for field. */

/** The three-part imaging-condition description of a composite. */
export interface DescriptionTriple {
  object: string[];
  foreground: string[];
  background: string[];
  provider_id?: string;
}

export type RunEventKind =
  | "description_generated"
  | "iteration_done"
  | "score"
  | "decision_proposed"
  | "awaiting_human"
  | "concluded"
  | "failed";

/** One entry of a job's append-only event log. */
export interface RunEvent {
  job_id: string;
  seq: number;
  kind: RunEventKind;
  payload: Record<string, unknown>;
}

export type JobStatus =
  | "queued"
  | "running"
  | "awaiting_human"
  | "concluded"
  | "failed"
  | "cancelled";

/** The persistent job record returned by GET /jobs/{id}. */
export interface JobRecord {
  job_id: string;
  case_id: string;
  image_file: string;
  mask_file: string;
  config: Record<string, unknown>;
  status: JobStatus;
  run_file: string | null;
  error: string | null;
  created_at: string;
  updated_at: string;
}

export type DecisionKind = "continue" | "regenerate" | "conclude";

/** Body of POST /jobs/{id}/decision. new_description only accompanies
 * regenerate and replaces the provider's next description verbatim. */
export interface DecisionRequest {
  kind: DecisionKind;
  revert_to?: number | null;
  new_description?: DescriptionTriple;
}

/** Error body the service returns on non-2xx responses. */
export interface ApiErrorBody {
  code: string;
  message: string;
}
