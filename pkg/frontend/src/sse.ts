/** Resumable event-stream client for a run's server-sent events.
 *
 * Wraps an EventSource-shaped transport behind an injectable factory so
 * tests can drive it with a fake. Guarantees delivered events are
 * strictly increasing in sequence number: duplicates are dropped and a
 * gap forces a reconnect that resumes from the last good sequence via
 * the ?last_seq= query parameter.
 */

import type { RunEvent, RunEventKind } from "./types.js";

export const EVENT_KINDS: readonly RunEventKind[] = [
  "description_generated",
  "iteration_done",
  "score",
  "decision_proposed",
  "awaiting_human",
  "concluded",
  "failed",
];

const TERMINAL_KINDS: ReadonlySet<string> = new Set(["concluded", "failed"]);

export interface MessageLike {
  data: string;
}

/** The slice of EventSource this client needs. */
export interface EventSourceLike {
  addEventListener(type: string, listener: (event: MessageLike) => void): void;
  close(): void;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

export interface StreamHandle {
  close(): void;
}

export interface StreamOptions {
  /** Transport constructor; defaults to the browser's EventSource. */
  factory?: EventSourceFactory;
  /** Resume point: highest sequence number already applied. */
  lastSeq?: number;
  /** Delay before reconnecting after an error or gap. */
  retryDelayMs?: number;
  onError?: (message: string) => void;
}

export function streamUrl(base: string, jobId: string, lastSeq: number): string {
  const root = base.replace(/\/+$/, "");
  return `${root}/jobs/${encodeURIComponent(jobId)}/events?last_seq=${lastSeq}`;
}

function defaultFactory(url: string): EventSourceLike {
  type EventSourceCtor = new (url: string) => EventSourceLike;
  const ctor = (globalThis as { EventSource?: EventSourceCtor }).EventSource;
  if (!ctor) {
    throw new Error("EventSource is not available in this environment");
  }
  return new ctor(url);
}

/** Open the event stream for a job and deliver each event exactly once,
 * in order, to onEvent. Returns a handle whose close() stops the stream
 * and all reconnect attempts. The stream closes itself after a terminal
 * event (concluded or failed). */
export function openRunStream(
  base: string,
  jobId: string,
  onEvent: (event: RunEvent) => void,
  options: StreamOptions = {},
): StreamHandle {
  const factory = options.factory ?? defaultFactory;
  const retryDelayMs = options.retryDelayMs ?? 1000;
  let lastSeq = options.lastSeq ?? 0;
  let source: EventSourceLike | null = null;
  let closed = false;
  let retryTimer: ReturnType<typeof setTimeout> | null = null;

  const reconnect = (reason: string) => {
    if (closed || retryTimer !== null) {
      return;
    }
    if (source) {
      source.close();
      source = null;
    }
    options.onError?.(reason);
    retryTimer = setTimeout(connect, retryDelayMs);
  };

  const handleMessage = (message: MessageLike) => {
    if (closed) {
      return;
    }
    let event: RunEvent;
    try {
      event = JSON.parse(message.data) as RunEvent;
    } catch {
      reconnect("unparseable event payload");
      return;
    }
    if (event.seq <= lastSeq) {
      return; // duplicate delivery
    }
    if (event.seq > lastSeq + 1) {
      reconnect(`missed events after seq ${lastSeq}`);
      return;
    }
    lastSeq = event.seq;
    onEvent(event);
    if (TERMINAL_KINDS.has(event.kind)) {
      closed = true;
      source?.close();
      source = null;
    }
  };

  const connect = () => {
    if (closed) {
      return;
    }
    retryTimer = null;
    source = factory(streamUrl(base, jobId, lastSeq));
    for (const kind of EVENT_KINDS) {
      source.addEventListener(kind, handleMessage);
    }
    source.addEventListener("error", () => reconnect("stream dropped"));
  };

  connect();
  return {
    close() {
      closed = true;
      if (retryTimer !== null) {
        clearTimeout(retryTimer);
        retryTimer = null;
      }
      source?.close();
      source = null;
    },
  };
}
