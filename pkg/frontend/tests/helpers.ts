import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";

import type {
  DecisionRequest,
  JobRecord,
  RunEvent,
} from "../src/types.js";

export interface RecordedRun {
  job: JobRecord;
  events: RunEvent[];
  decision?: DecisionRequest;
}

/** Load a recorded service run (job record + its full event log, plus
 * the steering decision that produced it, when one was posted). */
export function loadRecordedRun(name: string): RecordedRun {
  const path = fileURLToPath(new URL(`./fixtures/${name}`, import.meta.url));
  return JSON.parse(readFileSync(path, "utf-8")) as RecordedRun;
}
