/** Pure fold from the run event stream to the rendered run model.
 *
 * The view is rebuilt exclusively from events: replaying a recorded log
 * yields the exact same model, duplicate deliveries are no-ops (guarded
 * by sequence number), and folding a prefix then the rest equals
 * folding everything at once. Nothing here touches the network or DOM.
 */

import type {
  DecisionKind,
  DescriptionTriple,
  JobStatus,
  RunEvent,
} from "./types.js";

export interface IterationCard {
  index: number;
  description: DescriptionTriple;
  /** Artifact file name, e.g. "iter_0.png"; resolve via artifactUrl(). */
  image: string;
  flaggedSteps: number[];
  score: number | null;
  /** Badge from the decision that followed this iteration, if any. */
  decision: DecisionBadge | null;
}

export interface DecisionBadge {
  kind: DecisionKind;
  revertTo: number | null;
  source: string;
}

export interface Proposal {
  kind: DecisionKind;
  revertTo: number | null;
}

export interface RunView {
  jobId: string;
  status: JobStatus;
  /** Every description the provider (or a human override) produced. */
  descriptions: DescriptionTriple[];
  /** The description seeding the next iteration; editable when paused. */
  currentDescription: DescriptionTriple | null;
  iterations: IterationCard[];
  decisions: DecisionBadge[];
  /** Pending proposal while status is awaiting_human. */
  proposal: Proposal | null;
  bestIndex: number | null;
  bestScore: number | null;
  finalImage: string | null;
  error: string | null;
  /** Highest sequence number folded in; duplicates at or below are ignored. */
  lastSeq: number;
}

export function initialView(jobId: string): RunView {
  return {
    jobId,
    status: "queued",
    descriptions: [],
    currentDescription: null,
    iterations: [],
    decisions: [],
    proposal: null,
    bestIndex: null,
    bestScore: null,
    finalImage: null,
    error: null,
    lastSeq: 0,
  };
}

function asTriple(value: unknown): DescriptionTriple {
  const raw = value as Partial<DescriptionTriple>;
  return {
    object: [...(raw.object ?? [])],
    foreground: [...(raw.foreground ?? [])],
    background: [...(raw.background ?? [])],
    provider_id: raw.provider_id,
  };
}

/** Fold one event into the view, returning a new view object. Events
 * already seen (seq at or below lastSeq) return the input unchanged. */
export function reduce(view: RunView, event: RunEvent): RunView {
  if (event.seq <= view.lastSeq) {
    return view;
  }
  const next: RunView = {
    ...view,
    // any event proves the worker is past the queue; terminal and pause
    // events overwrite this below
    status: view.status === "queued" ? "running" : view.status,
    lastSeq: event.seq,
  };
  const payload = event.payload;
  switch (event.kind) {
    case "description_generated": {
      const triple = asTriple(payload["description"]);
      next.descriptions = [...view.descriptions, triple];
      next.currentDescription = triple;
      break;
    }
    case "iteration_done": {
      const card: IterationCard = {
        index: payload["index"] as number,
        description: asTriple(payload["description"]),
        image: payload["image"] as string,
        flaggedSteps: [...((payload["flagged_steps"] as number[]) ?? [])],
        score: null,
        decision: null,
      };
      next.iterations = [...view.iterations, card];
      break;
    }
    case "score": {
      const index = payload["index"] as number;
      const value = payload["value"] as number;
      next.iterations = view.iterations.map((card) =>
        card.index === index ? { ...card, score: value } : card,
      );
      if (next.bestScore === null || value > next.bestScore) {
        next.bestScore = value;
        next.bestIndex = index;
      }
      break;
    }
    case "decision_proposed": {
      const badge: DecisionBadge = {
        kind: payload["kind"] as DecisionKind,
        revertTo: (payload["revert_to"] as number | null) ?? null,
        source: payload["source"] as string,
      };
      next.decisions = [...view.decisions, badge];
      next.proposal = null;
      next.status = "running";
      if (view.iterations.length > 0) {
        const last = view.iterations.length - 1;
        next.iterations = view.iterations.map((card, i) =>
          i === last ? { ...card, decision: badge } : card,
        );
      }
      break;
    }
    case "awaiting_human": {
      const proposal = payload["proposal"] as {
        kind: DecisionKind;
        revert_to: number | null;
      };
      next.proposal = { kind: proposal.kind, revertTo: proposal.revert_to };
      next.status = "awaiting_human";
      break;
    }
    case "concluded": {
      next.status = "concluded";
      next.bestIndex = payload["best_index"] as number;
      next.bestScore = payload["best_score"] as number;
      next.finalImage = payload["image"] as string;
      next.proposal = null;
      break;
    }
    case "failed": {
      next.status = "failed";
      next.error = (payload["error"] as string) ?? "unknown failure";
      next.proposal = null;
      break;
    }
    default:
      // unknown kinds still advance lastSeq so a future server version
      // does not wedge the stream
      break;
  }
  return next;
}

export function reduceAll(view: RunView, events: RunEvent[]): RunView {
  return events.reduce(reduce, view);
}
