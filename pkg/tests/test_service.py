"""Job service tests: submission, streaming, steering, artifacts,
crash recovery, and resume consistency."""

from __future__ import annotations

import io
import json
import os
import random
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import jsonschema
import numpy as np
import pytest
from PIL import Image
from starlette.testclient import TestClient

from harmonia import service as svc_mod
from harmonia.descriptor import ScriptedProvider
from harmonia.evaluate import ScriptedEvaluator
from harmonia.fixtures import ShiftSpec, make_composite_case
from harmonia.luts import import_lut
from harmonia.service import (
    EVENTS_FILE,
    JOB_RECORD_SCHEMA,
    RUN_EVENT_SCHEMA,
    RUN_STATE_SCHEMA,
    JobService,
    ServiceConfig,
    create_app,
)

LINES = [
    "object: dog | foreground: overbright | background: dusky",
    "object: dog | foreground: washed, flat | background: shaded",
    "object: dog | foreground: radiant | background: dim, cool",
    "object: dog | foreground: pale | background: muted",
]

FAST_CONFIG = {
    "sampler": {"steps": 8},
    "k_candidates": 1,
    "decisions": {"max_iterations": 3, "max_regenerations": 1},
}

TERMINAL = ("concluded", "failed", "cancelled")


def png_bytes(array: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def case_bytes(seed: int = 7) -> tuple[bytes, bytes]:
    case = make_composite_case(seed=seed, shift=ShiftSpec(d_brightness=0.3))
    image = png_bytes((case.image.pixels * 255).astype(np.uint8), "RGB")
    mask = png_bytes((case.mask.values * 255).astype(np.uint8), "L")
    return image, mask


def make_service(tmp_path: Path, scores=None, **cfg_kwargs) -> JobService:
    evaluator_factory = None
    if scores is not None:
        evaluator_factory = lambda record: ScriptedEvaluator(list(scores))
    cfg = ServiceConfig(
        run_root=tmp_path / "jobs",
        describer_factory=lambda record: ScriptedProvider(
            LINES, seed=int(record.config.get("seed", 0))),
        evaluator_factory=evaluator_factory,
        **cfg_kwargs,
    )
    return JobService(cfg)


def submit(client, image: bytes, mask: bytes, config: dict | None = None):
    files = {"image": ("image.png", image, "image/png"),
             "mask": ("mask.png", mask, "image/png")}
    data = {"config": json.dumps(config or {})}
    return client.post("/jobs", files=files, data=data)


def wait_for(client, job_id: str, statuses, timeout: float = 60.0) -> dict:
    deadline = time.monotonic() + timeout
    record = {}
    while time.monotonic() < deadline:
        record = client.get(f"/jobs/{job_id}").json()
        if record["status"] in statuses:
            return record
        time.sleep(0.03)
    raise AssertionError(
        f"job {job_id} stuck in {record.get('status')}, wanted {statuses}")


def sse_events(client, job_id: str, last_seq: int = 0,
               limit: int | None = None) -> list[dict]:
    """Collect SSE data frames, optionally closing after `limit` events."""
    events = []
    with client.stream("GET", f"/jobs/{job_id}/events",
                       params={"last_seq": last_seq}) as resp:
        assert resp.status_code == 200
        for line in resp.iter_lines():
            if not line.startswith("data: "):
                continue
            events.append(json.loads(line[len("data: "):]))
            if limit is not None and len(events) >= limit:
                break
    return events


@pytest.fixture()
def stack(tmp_path):
    """A started service with scripted describer and rising scores."""
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    app = create_app(service)
    with TestClient(app) as client:
        yield service, client


@pytest.fixture(scope="module")
def concluded_stack(tmp_path_factory):
    """One job run to conclusion, shared by read-only streaming tests."""
    tmp_path = tmp_path_factory.mktemp("concluded")
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    app = create_app(service)
    image, mask = case_bytes()
    with TestClient(app) as client:
        job_id = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        record = wait_for(client, job_id, TERMINAL)
        assert record["status"] == "concluded", record
        yield service, client, job_id


def test_submit_valid_pair_accepted(stack):
    service, client = stack
    image, mask = case_bytes()
    response = submit(client, image, mask, FAST_CONFIG)
    assert response.status_code == 202
    body = response.json()
    assert body["status"] == "queued"
    record = client.get(f"/jobs/{body['job_id']}").json()
    jsonschema.validate(record, JOB_RECORD_SCHEMA)
    assert record["config"]["sampler"]["steps"] == 8
    wait_for(client, body["job_id"], TERMINAL)


def test_submit_shape_mismatch_rejected(stack):
    _, client = stack
    image, _ = case_bytes()
    bad_mask = png_bytes(
        np.zeros((12, 12), dtype=np.uint8) + np.array(
            [[255] * 6 + [0] * 6] * 12, dtype=np.uint8), "L")
    response = submit(client, image, bad_mask)
    assert response.status_code == 400
    assert response.json()["code"] == "MASK_SHAPE"


def test_submit_degenerate_mask_rejected(stack):
    _, client = stack
    image, _ = case_bytes()
    empty = png_bytes(np.zeros((16, 16), dtype=np.uint8), "L")
    response = submit(client, image, empty)
    assert response.status_code == 400
    assert response.json()["code"] == "DEGENERATE_MASK"


def test_submit_undecodable_image_rejected(stack):
    _, client = stack
    _, mask = case_bytes()
    response = submit(client, b"not a png", mask)
    assert response.status_code == 400
    assert response.json()["code"] == "BAD_INPUT"


def test_submit_bad_config_rejected(stack):
    _, client = stack
    image, mask = case_bytes()
    files = {"image": ("i.png", image, "image/png"),
             "mask": ("m.png", mask, "image/png")}
    response = stack[1].post("/jobs", files=files,
                             data={"config": "{not json"})
    assert response.status_code == 400
    assert response.json()["code"] == "BAD_CONFIG"
    response = submit(client, image, mask, {"k_candidats": 3})
    assert response.status_code == 400
    assert response.json()["code"] == "BAD_CONFIG"


def test_unknown_job_is_404(stack):
    _, client = stack
    assert client.get("/jobs/feedfacecafe").status_code == 404
    assert client.get("/jobs/feedfacecafe/events").status_code == 404
    assert client.post("/jobs/feedfacecafe/decision",
                       json={"kind": "continue"}).status_code == 404
    assert client.get(
        "/jobs/feedfacecafe/artifacts/iteration/0").status_code == 404


def test_event_stream_replays_and_validates(concluded_stack):
    _, client, job_id = concluded_stack
    events = sse_events(client, job_id)
    assert [e["seq"] for e in events] == list(range(1, len(events) + 1))
    for event in events:
        jsonschema.validate(event, RUN_EVENT_SCHEMA)
    kinds = [e["kind"] for e in events]
    assert kinds[0] == "description_generated"
    assert kinds[-1] == "concluded"
    assert kinds.count("iteration_done") == 3
    assert kinds.count("score") == 3


def test_event_stream_resumes_without_gaps_or_duplicates(concluded_stack):
    _, client, job_id = concluded_stack
    full = sse_events(client, job_id)
    for cut in range(len(full) + 1):
        tail = sse_events(client, job_id, last_seq=cut)
        assert [e["seq"] for e in tail] == [e["seq"] for e in full[cut:]]


def test_event_log_matches_run_state(concluded_stack):
    service, client, job_id = concluded_stack
    run_state = client.get(f"/jobs/{job_id}/artifacts/run/json").json()
    jsonschema.validate(run_state, RUN_STATE_SCHEMA)
    events = sse_events(client, job_id)

    scores = [e["payload"]["value"] for e in events if e["kind"] == "score"]
    assert scores == run_state["scores"]

    described = [e["payload"]["description"] for e in events
                 if e["kind"] == "description_generated"]
    assert described == run_state["descriptions"]

    decided = [(e["payload"]["kind"], e["payload"]["revert_to"],
                e["payload"]["source"])
               for e in events if e["kind"] == "decision_proposed"]
    assert decided == [(d["kind"], d["revert_to"], d["source"])
                       for d in run_state["decisions"]]

    concluded = [e for e in events if e["kind"] == "concluded"]
    assert len(concluded) == 1
    assert concluded[0]["payload"]["best_index"] == run_state["best_index"]

    on_disk = (Path(service.root) / job_id / EVENTS_FILE).read_text()
    disk_events = [json.loads(line) for line in on_disk.splitlines()]
    assert disk_events == events


def test_randomized_disconnect_schedules_lose_nothing(concluded_stack):
    _, client, job_id = concluded_stack
    total = len(sse_events(client, job_id))
    assert total > 0
    for trial in range(100):
        rng = random.Random(trial)
        received: list[int] = []
        cursor = 0
        while cursor < total:
            take = rng.randint(1, total - cursor)
            chunk = sse_events(client, job_id, last_seq=cursor, limit=take)
            received.extend(e["seq"] for e in chunk)
            cursor = received[-1]
        assert received == list(range(1, total + 1)), f"trial {trial}"


def test_artifact_bytes_match_run_directory(concluded_stack):
    service, client, job_id = concluded_stack
    run_dir = Path(service.root) / job_id / "run"

    got = client.get(f"/jobs/{job_id}/artifacts/iteration/0")
    assert got.status_code == 200
    assert got.headers["content-type"] == "image/png"
    assert got.content == (run_dir / "iter_0.png").read_bytes()

    lut = client.get(f"/jobs/{job_id}/artifacts/lut/0")
    assert lut.status_code == 200
    assert lut.text == (run_dir / "lut_0.cube").read_text()
    parsed = import_lut(run_dir / "lut_0.cube")
    assert parsed.lattice_size >= 2

    attn_name = sorted(p.stem for p in (run_dir / "attn_0").glob("*.png"))[0]
    attn = client.get(f"/jobs/{job_id}/artifacts/attention/0/{attn_name}")
    assert attn.status_code == 200
    assert attn.content == (run_dir / "attn_0" / f"{attn_name}.png"
                            ).read_bytes()

    run_json = client.get(f"/jobs/{job_id}/artifacts/run/json")
    assert run_json.status_code == 200
    assert run_json.json() == json.loads((run_dir / "run.json").read_text())


def test_artifact_unknown_paths_are_404(concluded_stack):
    service, client, job_id = concluded_stack
    assert client.get(
        f"/jobs/{job_id}/artifacts/iteration/99").status_code == 404
    assert client.get(
        f"/jobs/{job_id}/artifacts/mystery/0").status_code == 404
    assert client.get(
        f"/jobs/{job_id}/artifacts/iteration/0x1").status_code == 404
    for traversal in ("0/../../job.json", "0/..", "0/run"):
        with pytest.raises(svc_mod.UnknownJob):
            service.artifact_path(job_id, "attention", traversal)


def test_schemas_published(stack):
    _, client = stack
    for name in ("job", "event", "run"):
        body = client.get(f"/schemas/{name}").json()
        jsonschema.Draft202012Validator.check_schema(body)
        assert client.get(f"/schemas/{name}.json").json() == body
    assert client.get("/schemas/nope").status_code == 404


def test_decision_on_running_job_conflicts(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    image, mask = case_bytes()
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        response = client.post(f"/jobs/{job_id}/decision",
                               json={"kind": "continue"})
        assert response.status_code == 409
        assert response.json()["code"] == "NOT_AWAITING_HUMAN"
        wait_for(client, job_id, TERMINAL)


def test_interactive_pause_continue_and_conclude(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    image, mask = case_bytes()
    config = dict(FAST_CONFIG, interactive=True)
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, config).json()["job_id"]
        record = wait_for(client, job_id, ("awaiting_human",))
        jsonschema.validate(record, JOB_RECORD_SCHEMA)

        events = service.events_after(job_id)
        paused = [e for e in events if e["kind"] == "awaiting_human"]
        assert paused and "kind" in paused[-1]["payload"]["proposal"]

        assert client.post(f"/jobs/{job_id}/decision",
                           json={"kind": "continue"}).status_code == 200
        wait_for(client, job_id, ("awaiting_human",))
        assert client.post(f"/jobs/{job_id}/decision",
                           json={"kind": "conclude"}).status_code == 200
        record = wait_for(client, job_id, TERMINAL)
        assert record["status"] == "concluded"

        run_state = client.get(f"/jobs/{job_id}/artifacts/run/json").json()
        assert [d["source"] for d in run_state["decisions"]] == \
            ["human", "human"]


def test_regenerate_decision_carries_edited_description(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.8, 0.9])
    image, mask = case_bytes()
    config = dict(FAST_CONFIG, interactive=True)
    edited = {"object": ["dog"], "foreground": ["icy", "pale"],
              "background": ["midnight"]}
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, config).json()["job_id"]
        wait_for(client, job_id, ("awaiting_human",))
        response = client.post(
            f"/jobs/{job_id}/decision",
            json={"kind": "regenerate", "new_description": edited})
        assert response.status_code == 200
        wait_for(client, job_id, ("awaiting_human",))
        client.post(f"/jobs/{job_id}/decision", json={"kind": "conclude"})
        wait_for(client, job_id, TERMINAL)

        events = service.events_after(job_id)
        iterations = [e for e in events if e["kind"] == "iteration_done"]
        description = iterations[1]["payload"]["description"]
        assert description["object"] == edited["object"]
        assert description["foreground"] == edited["foreground"]
        assert description["background"] == edited["background"]
        generated = [e["payload"]["description"] for e in events
                     if e["kind"] == "description_generated"]
        assert generated[-1]["foreground"] == ["icy", "pale"]


def test_malformed_decisions_rejected(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    image, mask = case_bytes()
    config = dict(FAST_CONFIG, interactive=True)
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, config).json()["job_id"]
        wait_for(client, job_id, ("awaiting_human",))

        cases = [
            {"kind": "explode"},
            {"kind": "continue",
             "new_description": {"object": ["a"], "foreground": ["b"],
                                 "background": ["c"]}},
            {"kind": "regenerate", "revert_to": 7},
            {"kind": "regenerate", "revert_to": "zero"},
            {"kind": "regenerate",
             "new_description": {"object": ["a"]}},
        ]
        for payload in cases:
            response = client.post(f"/jobs/{job_id}/decision", json=payload)
            assert response.status_code == 400, payload
        record = client.get(f"/jobs/{job_id}").json()
        assert record["status"] == "awaiting_human"

        client.post(f"/jobs/{job_id}/decision", json={"kind": "conclude"})
        wait_for(client, job_id, TERMINAL)


def test_cancel_queued_and_paused_jobs(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8],
                           max_sessions=1)
    image, mask = case_bytes()
    interactive = dict(FAST_CONFIG, interactive=True)
    with TestClient(create_app(service)) as client:
        first = submit(client, image, mask, interactive).json()["job_id"]
        second = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        wait_for(client, first, ("awaiting_human",))
        assert client.get(f"/jobs/{second}").json()["status"] == "queued"

        assert client.post(f"/jobs/{second}/cancel").status_code == 200
        assert wait_for(client, second, TERMINAL)["status"] == "cancelled"

        client.post(f"/jobs/{first}/cancel")
        record = wait_for(client, first, TERMINAL)
        assert record["status"] == "cancelled"
        response = client.post(f"/jobs/{first}/decision",
                               json={"kind": "continue"})
        assert response.status_code == 409


def test_each_job_gets_its_own_backend(tmp_path):
    from harmonia.diffusion import ToyBackend

    backends: list[ToyBackend] = []

    def factory():
        backend = ToyBackend()
        backends.append(backend)
        return backend

    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8],
                           max_sessions=1, backend_factory=factory)
    image, mask = case_bytes()
    with TestClient(create_app(service)) as client:
        ids = [submit(client, image, mask, FAST_CONFIG).json()["job_id"]
               for _ in range(2)]
        for job_id in ids:
            assert wait_for(client, job_id, TERMINAL)["status"] == "concluded"
    assert len(backends) == 2
    assert backends[0] is not backends[1]


def test_missing_provider_fails_job_cleanly(tmp_path):
    service = JobService(ServiceConfig(run_root=tmp_path / "jobs"))
    image, mask = case_bytes()
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        record = wait_for(client, job_id, TERMINAL)
        assert record["status"] == "failed"
        assert "provider" in record["error"]
        events = service.events_after(job_id)
        assert events[-1]["kind"] == "failed"


def test_recovery_requeues_and_adopts_terminal_states(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    image, mask = case_bytes()
    with TestClient(create_app(service)) as client:
        done = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        wait_for(client, done, TERMINAL)

    # Simulate a crash: rewrite one job as mid-run, add a queued one.
    root = Path(service.root)
    done_dir = root / done

    interrupted_dir = root / "deadbeef0001"
    interrupted_dir.mkdir()
    record = json.loads((done_dir / "job.json").read_text())
    record.update(job_id="deadbeef0001", status="running")
    (interrupted_dir / "job.json").write_text(json.dumps(record))
    for name in ("image.png", "mask.png"):
        (interrupted_dir / name).write_bytes((done_dir / name).read_bytes())
    events = (done_dir / EVENTS_FILE).read_text().splitlines()[:3]
    fixed = [json.dumps(dict(json.loads(line), job_id="deadbeef0001"))
             for line in events]
    (interrupted_dir / EVENTS_FILE).write_text("\n".join(fixed) + "\n")

    queued_dir = root / "deadbeef0002"
    queued_dir.mkdir()
    record = json.loads((done_dir / "job.json").read_text())
    record.update(job_id="deadbeef0002", status="queued", run_file=None)
    (queued_dir / "job.json").write_text(json.dumps(record))
    for name in ("image.png", "mask.png"):
        (queued_dir / name).write_bytes((done_dir / name).read_bytes())

    revived = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    with TestClient(create_app(revived)) as client:
        listed = {r["job_id"]: r["status"]
                  for r in client.get("/jobs").json()["jobs"]}
        assert listed[done] == "concluded"
        assert listed["deadbeef0001"] == "failed"
        record = client.get("/jobs/deadbeef0001").json()
        assert "interrupted" in record["error"]
        tail = revived.events_after("deadbeef0001")
        assert tail[-1]["kind"] == "failed"
        assert [e["seq"] for e in tail] == list(range(1, len(tail) + 1))

        record = wait_for(client, "deadbeef0002", TERMINAL)
        assert record["status"] == "concluded"


def test_recovery_adopts_concluded_event_log(tmp_path):
    service = make_service(tmp_path, scores=[0.5, 0.6, 0.7, 0.8])
    image, mask = case_bytes()
    with TestClient(create_app(service)) as client:
        job_id = submit(client, image, mask, FAST_CONFIG).json()["job_id"]
        wait_for(client, job_id, TERMINAL)

    job_file = Path(service.root) / job_id / "job.json"
    record = json.loads(job_file.read_text())
    record["status"] = "running"
    job_file.write_text(json.dumps(record))

    revived = make_service(tmp_path)
    assert revived.get(job_id).record.status == "concluded"


# ----------------------------------------------------------------------
# Subprocess kill-and-restart harness.


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _start_server(env: dict, port: int) -> subprocess.Popen:
    return subprocess.Popen(
        [sys.executable, "-m", "uvicorn", "--factory",
         "harmonia.service:build_app", "--host", "127.0.0.1",
         "--port", str(port), "--log-level", "warning"],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.STDOUT)


def _wait_up(port: int, timeout: float = 20.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            httpx.get(f"http://127.0.0.1:{port}/jobs",
                      timeout=1.0).raise_for_status()
            return
        except httpx.HTTPError:
            time.sleep(0.1)
    raise AssertionError("server did not come up")


def test_kill_and_restart_loses_no_jobs(tmp_path):
    image, mask = case_bytes()
    lines_file = tmp_path / "lines.txt"
    lines_file.write_text("\n".join(LINES) + "\n")
    port = _free_port()
    env = dict(
        os.environ,
        HARMONIA_RUN_ROOT=str(tmp_path / "jobs"),
        HARMONIA_DESCRIPTIONS=str(lines_file),
        HARMONIA_MAX_SESSIONS="1",
    )
    config = {"sampler": {"steps": 10}, "k_candidates": 2,
              "decisions": {"max_iterations": 4}}

    server = _start_server(env, port)
    try:
        _wait_up(port)
        with httpx.Client(base_url=f"http://127.0.0.1:{port}",
                          timeout=10.0) as client:
            job_ids = []
            for _ in range(3):
                response = client.post(
                    "/jobs",
                    files={"image": ("i.png", image),
                           "mask": ("m.png", mask)},
                    data={"config": json.dumps(config)})
                assert response.status_code == 202
                job_ids.append(response.json()["job_id"])
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                states = {j: client.get(f"/jobs/{j}").json()["status"]
                          for j in job_ids}
                if "running" in states.values():
                    break
                time.sleep(0.05)
            assert "running" in states.values(), states
    finally:
        server.send_signal(signal.SIGKILL)
        server.wait()

    server = _start_server(env, port)
    try:
        _wait_up(port)
        with httpx.Client(base_url=f"http://127.0.0.1:{port}",
                          timeout=10.0) as client:
            listed = {j["job_id"]: j["status"]
                      for j in client.get("/jobs").json()["jobs"]}
            assert set(listed) == set(job_ids)

            deadline = time.monotonic() + 120
            while time.monotonic() < deadline:
                listed = {j["job_id"]: j["status"]
                          for j in client.get("/jobs").json()["jobs"]}
                if all(s in TERMINAL for s in listed.values()):
                    break
                time.sleep(0.2)
            assert all(s in TERMINAL for s in listed.values()), listed
            assert any(s == "concluded" for s in listed.values())

            for job_id in job_ids:
                with client.stream(
                        "GET", f"/jobs/{job_id}/events") as response:
                    seqs = [json.loads(line[len("data: "):])["seq"]
                            for line in response.iter_lines()
                            if line.startswith("data: ")]
                assert seqs == list(range(1, len(seqs) + 1)), job_id

                record = client.get(f"/jobs/{job_id}").json()
                if record["status"] == "failed":
                    assert "interrupted" in record["error"]
    finally:
        server.send_signal(signal.SIGKILL)
        server.wait()
