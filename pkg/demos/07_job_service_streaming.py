"""The job queue: submit a composite, stream progress, survive restarts.

The service persists every job and its event log on disk before
emitting anything, so a consumer can disconnect and resume from any
sequence number, and a restarted service picks up where it left off.
This demo drives the service layer in process; `harmonia serve`
exposes the same operations over HTTP.
"""

import io
import json
import tempfile
import time
from pathlib import Path

import numpy as np
from PIL import Image

from harmonia.descriptor import ScriptedProvider
from harmonia.fixtures import ShiftSpec, make_composite_case
from harmonia.service import JobService, ServiceConfig

LINES = [
    "object: subject | foreground: bright warm sunny | "
    "background: dim cool overcast",
    "object: subject | foreground: pale washed flat | "
    "background: deep rich contrast",
]


def png_bytes(array: np.ndarray, mode: str) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buffer, format="PNG")
    return buffer.getvalue()


def main() -> None:
    case = make_composite_case(seed=7, shift=ShiftSpec(d_brightness=0.3))
    image = png_bytes((case.image.pixels * 255).astype(np.uint8), "RGB")
    mask = png_bytes((case.mask.values * 255).astype(np.uint8), "L")

    root = Path(tempfile.mkdtemp(prefix="harmonia-demo-"))
    service = JobService(ServiceConfig(
        run_root=root / "jobs",
        describer_factory=lambda record: ScriptedProvider(LINES),
        max_sessions=1))
    service.start()
    try:
        # 1. Submit: inputs and config are validated and persisted first.
        record = service.submit(image, mask, {
            "sampler": {"steps": 10}, "k_candidates": 2,
            "decisions": {"max_iterations": 3}})
        print(f"submitted job {record.job_id} ({record.status})")

        # 2. Stream: replays the log from the start, then follows live.
        #    Each frame carries id/event/data lines in SSE wire format.
        print("event stream:")
        last_seq = 0
        for frame in service.stream(record.job_id):
            data_lines = [line for line in frame.splitlines()
                          if line.startswith("data: ")]
            if not data_lines:
                continue  # keepalive comment
            event = json.loads(data_lines[0][len("data: "):])
            last_seq = event["seq"]
            print(f"  #{event['seq']:>2} {event['kind']}")
            if event["kind"] in ("concluded", "failed"):
                break

        # 3. Resume: ask only for what came after a given sequence number.
        resume_from = max(last_seq - 2, 0)
        replay = service.events_after(record.job_id, last_seq=resume_from)
        print(f"resuming after #{resume_from} replays "
              f"{len(replay)} events: "
              + ", ".join(e["kind"] for e in replay))

        # 4. The on-disk record is the source of truth across restarts.
        #    The concluded event lands just before the status flips, so
        #    give the worker a moment to finish the bookkeeping.
        deadline = time.monotonic() + 10.0
        final = service.get(record.job_id).record
        while (final.status not in ("concluded", "failed", "cancelled")
               and time.monotonic() < deadline):
            time.sleep(0.05)
            final = service.get(record.job_id).record
        print(f"final status: {final.status}; artifacts under "
              f"{root / 'jobs' / record.job_id}")
    finally:
        service.stop()


if __name__ == "__main__":
    main()
