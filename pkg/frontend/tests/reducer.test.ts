/** Replay purity: the run model is a pure fold over the event stream,
 * so replaying a recorded log reproduces the rendered model exactly,
 * regardless of how the delivery was chunked or duplicated. */

import { describe, expect, it } from "vitest";

import { initialView, reduce, reduceAll } from "../src/reducer.js";
import { loadRecordedRun } from "./helpers.js";

const recorded = loadRecordedRun("run_events.json");

describe("run model fold", () => {
  it("replaying the recorded event log reproduces the run model exactly", () => {
    const view = reduceAll(initialView(recorded.job.job_id), recorded.events);
    expect(view).toMatchSnapshot();
    expect(view.status).toBe("concluded");
    expect(view.iterations.map((card) => card.index)).toEqual([0, 1, 2]);
    expect(view.iterations.map((card) => card.score)).toEqual([
      0.6339068538202911, 0.25540606490114953, 0.44735080829183427,
    ]);
    expect(view.bestIndex).toBe(0);
    expect(view.finalImage).toBe("iter_0.png");
    expect(view.lastSeq).toBe(recorded.events.length);
  });

  it("chunked delivery folds to the same model as one-shot delivery", () => {
    const whole = reduceAll(initialView(recorded.job.job_id), recorded.events);
    for (let split = 0; split <= recorded.events.length; split += 1) {
      const head = recorded.events.slice(0, split);
      const tail = recorded.events.slice(split);
      const resumed = reduceAll(
        reduceAll(initialView(recorded.job.job_id), head),
        tail,
      );
      expect(resumed).toEqual(whole);
    }
  });

  it("duplicate deliveries are ignored without changing the model", () => {
    const whole = reduceAll(initialView(recorded.job.job_id), recorded.events);
    const doubled = recorded.events.flatMap((event) => [event, event]);
    expect(reduceAll(initialView(recorded.job.job_id), doubled)).toEqual(whole);
    // a stale event returns the identical object, not just an equal one
    const first = recorded.events[0]!;
    expect(reduce(whole, first)).toBe(whole);
  });

  it("replayed-with-overlap delivery (reconnect semantics) stays exact", () => {
    // a resume replays everything after last_seq; simulate reconnects
    // that re-send overlapping suffixes of the log
    const whole = reduceAll(initialView(recorded.job.job_id), recorded.events);
    let view = initialView(recorded.job.job_id);
    view = reduceAll(view, recorded.events.slice(0, 6));
    view = reduceAll(view, recorded.events.slice(3)); // overlap 4..6
    expect(view).toEqual(whole);
  });

  it("does not mutate prior views (each event yields a fresh model)", () => {
    const start = initialView(recorded.job.job_id);
    const frozen = JSON.stringify(start);
    const mid = reduceAll(start, recorded.events.slice(0, 5));
    const midFrozen = JSON.stringify(mid);
    reduceAll(mid, recorded.events.slice(5));
    expect(JSON.stringify(start)).toBe(frozen);
    expect(JSON.stringify(mid)).toBe(midFrozen);
  });

  it("tracks intermediate status transitions", () => {
    let view = initialView(recorded.job.job_id);
    expect(view.status).toBe("queued");
    view = reduce(view, recorded.events[0]!);
    expect(view.status).toBe("running");
    const afterDecision = reduceAll(
      initialView(recorded.job.job_id),
      recorded.events.slice(0, 7),
    );
    expect(afterDecision.decisions).toEqual([
      { kind: "continue", revertTo: null, source: "evaluator" },
    ]);
    expect(afterDecision.iterations[1]?.decision?.kind).toBe("continue");
  });

  it("keeps the best score at the earliest argmax, matching the server", () => {
    const view = reduceAll(initialView(recorded.job.job_id), recorded.events);
    const fromEvents = recorded.events.find((e) => e.kind === "concluded");
    expect(view.bestIndex).toBe(fromEvents?.payload["best_index"]);
    expect(view.bestScore).toBe(fromEvents?.payload["best_score"]);
  });
});
