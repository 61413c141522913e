#!/usr/bin/env python3
"""In-cluster coordinator service.

Receives a DeployRequest, checks namespaces and pod names, creates one test
runner pod per requested spec, watches every pod until its test containers
have terminated or its timeout elapses, and replies with per-pod results.
Pods are left in place; the launcher deletes them after extracting results.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

import click
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import PlainTextResponse, Response
from starlette.concurrency import run_in_threadpool

from cluster import (
    RUN_ID_LABEL,
    SIDECAR_NAME,
    ClusterBackend,
    ClusterError,
    ContainerBlueprint,
    ContainerState,
    ErrorKind,
    PodBlueprint,
    VolumeMount,
    sidecar_path,
)
from config import config, err_console, setup_logging
from protocol import (
    ContainerResult,
    DecodeError,
    DeployReply,
    DeployRequest,
    PodResult,
    PodStatus,
    ReplyCode,
    decode_request,
    encode_reply,
)
from run_config import TestRunnerPodSpec

logger = logging.getLogger(__name__)

DEPLOY_PATH = "/v1/deploy-test-runner"


class PodStage(str, Enum):
    VALIDATING = "Validating"
    CREATING = "Creating"
    WATCHING = "Watching"
    DONE = "Done"


_STAGE_ORDER = list(PodStage)


class RunState:
    """Progress of one in-flight run, safe to read from other threads."""

    def __init__(self, run_id: str, pods: list[tuple[str, str]]):
        self.run_id = run_id
        self.started_at = datetime.now(timezone.utc)
        self._lock = threading.Lock()
        self._stages = {key: PodStage.VALIDATING for key in pods}
        self._results: dict[tuple[str, str], PodResult] = {}

    def advance(self, key: tuple[str, str], stage: PodStage, result: Optional[PodResult] = None) -> None:
        with self._lock:
            current = self._stages[key]
            if _STAGE_ORDER.index(stage) < _STAGE_ORDER.index(current):
                raise ValueError(f"pod {key[0]}/{key[1]} cannot move from {current.value} back to {stage.value}")
            self._stages[key] = stage
            if result is not None:
                self._results[key] = result

    def advance_all(self, stage: PodStage) -> None:
        for key in list(self._stages):
            self.advance(key, stage)

    def stage(self, key: tuple[str, str]) -> PodStage:
        with self._lock:
            return self._stages[key]

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "runId": self.run_id,
                "startedAt": self.started_at.isoformat(),
                "pods": [
                    {
                        "namespace": ns,
                        "podName": name,
                        "stage": stage.value,
                        "status": self._results[(ns, name)].status.value if (ns, name) in self._results else None,
                    }
                    for (ns, name), stage in self._stages.items()
                ],
            }


def build_blueprint(spec: TestRunnerPodSpec, run_id: str, sidecar_image: Optional[str] = None) -> PodBlueprint:
    """Turn a validated pod spec into a pod blueprint with its result sidecar."""
    test_containers = tuple(
        ContainerBlueprint(
            name=c.container_name,
            image=c.image,
            command=tuple(c.startup_commands),
            args=tuple(c.startup_command_args),
            mounts=(VolumeMount(mount_path=c.test_result_path, sub_path=c.container_name),),
        )
        for c in spec.containers
    )
    sidecar = ContainerBlueprint(
        name=SIDECAR_NAME,
        image=sidecar_image or config.sidecar_image,
        command=tuple(config.sidecar_command),
        mounts=tuple(
            VolumeMount(mount_path=sidecar_path(c.container_name), sub_path=c.container_name)
            for c in spec.containers
        ),
    )
    return PodBlueprint(
        pod_name=spec.pod_name,
        namespace=spec.namespace,
        test_containers=test_containers,
        sidecar=sidecar,
        labels={RUN_ID_LABEL: run_id, "app.kubernetes.io/managed-by": "bunk8s"},
    )


def _pod_result(spec: TestRunnerPodSpec, states: dict[str, ContainerState], status: PodStatus, message: str) -> PodResult:
    containers = []
    for c in spec.containers:
        state = states.get(c.container_name)
        exit_code = state.exit_code if state is not None and state.terminated else None
        containers.append(ContainerResult.from_exit_code(c.container_name, c.test_result_path, exit_code))
    return PodResult(
        pod_name=spec.pod_name,
        namespace=spec.namespace,
        sidecar_name=SIDECAR_NAME,
        status=status,
        containers=containers,
        message=message,
    )


class Coordinator:
    """Runs the DeployTestRunner workflow against a cluster backend."""

    def __init__(self, backend: ClusterBackend, watch_retries: Optional[int] = None, sidecar_image: Optional[str] = None):
        self.backend = backend
        self.watch_retries = config.watch_retries if watch_retries is None else watch_retries
        self.sidecar_image = sidecar_image
        self._lock = threading.Lock()
        self._in_flight: set[tuple[str, str]] = set()
        self._runs: dict[str, RunState] = {}

    def runs(self) -> list[RunState]:
        with self._lock:
            return list(self._runs.values())

    def _reserve(self, keys: list[tuple[str, str]]) -> Optional[tuple[str, str]]:
        """Claim pod names for this run; returns the first name already claimed."""
        with self._lock:
            for key in keys:
                if key in self._in_flight:
                    return key
            self._in_flight.update(keys)
            return None

    def _release(self, keys: list[tuple[str, str]]) -> None:
        with self._lock:
            self._in_flight.difference_update(keys)

    def deploy(self, req: DeployRequest) -> DeployReply:
        """Execute one request; failures come back as reply codes, never exceptions."""
        keys = [pod.key for pod in req.run.pods]
        state = RunState(req.run_id, keys)
        with self._lock:
            self._runs[req.run_id] = state
        reserved: list[tuple[str, str]] = []
        created: list[tuple[str, str]] = []
        logger.info(f"Run {req.run_id}: deploying {len(keys)} test runner pod(s)")
        try:
            return self._deploy(req, state, reserved, created)
        except ClusterError as e:
            logger.error(f"Run {req.run_id}: cluster error {e}")
            self._delete_created(created)
            return self._fail(req, ReplyCode.ERR_INTERNAL, f"{e.resource}: {e}")
        except Exception as e:
            logger.exception(f"Run {req.run_id}: unexpected failure")
            # An ERR_INTERNAL reply lists no pods for the launcher to delete.
            self._delete_created(created)
            return self._fail(req, ReplyCode.ERR_INTERNAL, f"internal error: {e}")
        finally:
            self._release(reserved)
            with self._lock:
                self._runs.pop(req.run_id, None)

    def _fail(self, req: DeployRequest, code: ReplyCode, detail: str) -> DeployReply:
        logger.warning(f"Run {req.run_id}: {code.value} - {detail}")
        return DeployReply(run_id=req.run_id, code=code, detail=detail)

    def _deploy(self, req: DeployRequest, state: RunState, reserved: list, created: list) -> DeployReply:
        pods = req.run.pods

        for namespace in req.run.namespaces:
            if not self.backend.namespace_exists(namespace):
                return self._fail(req, ReplyCode.ERR_NAMESPACE_MISSING, f"namespace {namespace!r} does not exist")

        keys = [pod.key for pod in pods]
        taken = self._reserve(keys)
        if taken is not None:
            return self._fail(
                req, ReplyCode.ERR_POD_CONFLICT, f"pod {taken[1]!r} in namespace {taken[0]!r} is in use by another run"
            )
        reserved.extend(keys)

        for pod in pods:
            if self.backend.pod_exists(pod.namespace, pod.pod_name):
                return self._fail(
                    req,
                    ReplyCode.ERR_POD_CONFLICT,
                    f"pod {pod.pod_name!r} already exists in namespace {pod.namespace!r}",
                )

        state.advance_all(PodStage.CREATING)
        for pod in pods:
            blueprint = build_blueprint(pod, req.run_id, self.sidecar_image)
            try:
                self.backend.create_pod(blueprint)
            except ClusterError as e:
                self._delete_created(created)
                return self._fail(
                    req, ReplyCode.ERR_CREATE_FAILED, f"creating pod {pod.namespace}/{pod.pod_name} failed: {e}"
                )
            created.append(pod.key)

        state.advance_all(PodStage.WATCHING)
        with ThreadPoolExecutor(max_workers=len(pods), thread_name_prefix=f"watch-{req.run_id[:8]}") as pool:
            results = list(pool.map(self.watch_to_completion, pods))
        for pod, result in zip(pods, results):
            state.advance(pod.key, PodStage.DONE, result)

        logger.info(f"Run {req.run_id}: " + ", ".join(f"{r.pod_name}={r.status.value}" for r in results))
        return DeployReply(run_id=req.run_id, code=ReplyCode.OK, pods=results)

    def _delete_created(self, created: list[tuple[str, str]]) -> None:
        for namespace, pod_name in created:
            try:
                self.backend.delete_pod(namespace, pod_name)
            except ClusterError as e:
                logger.warning(f"Could not remove partially created pod {namespace}/{pod_name}: {e}")

    def watch_to_completion(self, spec: TestRunnerPodSpec) -> PodResult:
        """Watch one pod until its test containers terminate or its timeout elapses.

        The timeout counts from the first observed event of the pod. A broken
        watch is re-opened for whatever remains of it on the backend clock.
        """
        test_names = [c.container_name for c in spec.containers]
        latest: dict[str, ContainerState] = {}
        deadline: Optional[float] = None
        window = float(spec.test_timeout)
        retries = self.watch_retries
        where = f"{spec.namespace}/{spec.pod_name}"

        while True:
            try:
                stream = self.backend.watch_pod(spec.namespace, spec.pod_name, window)
                try:
                    for event in stream:
                        if deadline is None:
                            deadline = event.timestamp + spec.test_timeout
                        if event.timestamp > deadline:
                            break
                        for name, new_state in event.container_states.items():
                            if name not in latest or not latest[name].terminated:
                                latest[name] = new_state
                        logger.debug(
                            f"{where} {event.pod_phase.value}: "
                            + ", ".join(f"{n}={s}" for n, s in sorted(latest.items()))
                        )
                        if all(latest.get(n) is not None and latest[n].terminated for n in test_names):
                            passed = all(latest[n].exit_code == 0 for n in test_names)
                            status = PodStatus.SUCCEEDED if passed else PodStatus.FAILED
                            return _pod_result(spec, latest, status, "all test containers terminated")
                finally:
                    close = getattr(stream, "close", None)
                    if close is not None:
                        close()
                logger.warning(f"{where} timed out after {spec.test_timeout}s")
                return _pod_result(spec, latest, PodStatus.TIMED_OUT, f"test timeout of {spec.test_timeout}s elapsed")
            except ClusterError as e:
                if e.kind == ErrorKind.TRANSPORT and retries > 0:
                    retries -= 1
                    if deadline is not None:
                        window = deadline - self.backend.now(spec.namespace, spec.pod_name)
                        if window <= 0:
                            return _pod_result(
                                spec, latest, PodStatus.TIMED_OUT, f"test timeout of {spec.test_timeout}s elapsed"
                            )
                    logger.warning(f"{where} watch broke ({e}), re-establishing")
                    continue
                logger.warning(f"{where} watch failed: {e}")
                return _pod_result(spec, latest, PodStatus.ERROR, f"watch failed: {e}")


def deploy_test_runners(req: DeployRequest, backend: ClusterBackend) -> DeployReply:
    """Run one DeployTestRunner request against ``backend``."""
    return Coordinator(backend).deploy(req)


def create_app(coordinator: Coordinator) -> FastAPI:
    app = FastAPI(title="bunk8s coordinator")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.get("/v1/runs")
    def list_runs() -> list[dict]:
        return [run.snapshot() for run in coordinator.runs()]

    @app.post(DEPLOY_PATH)
    async def deploy_test_runner(request: Request) -> Response:
        body = await request.body()
        try:
            req = decode_request(body)
        except DecodeError as e:
            logger.warning(f"Rejected request: {e}")
            return PlainTextResponse(str(e), status_code=400)
        reply = await run_in_threadpool(coordinator.deploy, req)
        return Response(content=encode_reply(reply), media_type="application/json")

    return app


def parse_bind_address(bind_address: str) -> tuple[str, int]:
    host, sep, port = bind_address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address {bind_address!r} must look like HOST:PORT")
    return host.strip("[]") or "0.0.0.0", int(port)


def serve(bind_address: str, backend: ClusterBackend) -> None:
    """Serve DeployTestRunner calls until interrupted."""
    host, port = parse_bind_address(bind_address)
    app = create_app(Coordinator(backend))
    tls = {}
    if config.has_tls():
        tls = {"ssl_certfile": config.tls_cert, "ssl_keyfile": config.tls_key}
    scheme = "https" if tls else "http"
    logger.info(f"Coordinator listening on {scheme}://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level=config.log_level.lower(), **tls)


@click.command(name="bunk8s-coordinator")
@click.option("--bind", "bind_address", default=None, help="HOST:PORT to listen on (default: $BUNK8S_BIND or 0.0.0.0:8080)")
@click.option(
    "--fake-scenario",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Serve against an in-process fake cluster loaded from a scenario file",
)
def main(bind_address: Optional[str], fake_scenario: Optional[Path]):
    """Run the bunk8s coordinator service.

    Examples:
        python coordinator.py
        python coordinator.py --bind 127.0.0.1:9000 --fake-scenario scenario.json
    """
    setup_logging()
    if fake_scenario is not None:
        from fake_cluster import FakeCluster

        backend: ClusterBackend = FakeCluster.from_file(fake_scenario)
        err_console.print(f"[yellow]Using fake cluster from {fake_scenario}[/yellow]")
    else:
        from kube_cluster import KubeCluster

        try:
            backend = KubeCluster()
        except ClusterError as e:
            err_console.print(f"[red]Cannot reach Kubernetes: {e}[/red]")
            raise click.Abort()
    try:
        serve(bind_address or config.bind_address, backend)
    except ValueError as e:
        err_console.print(f"[red]{e}[/red]")
        raise click.Abort()


if __name__ == "__main__":
    main()
