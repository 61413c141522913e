"""In-process cluster backend driven by scenario files.

A scenario is a JSON document::

    {
      "namespaces": ["bunk8s-fe"],
      "existingPods": ["bunk8s-fe/already-there"],
      "pods": {
        "bunk8s-fe/test-runner-pod": {
          "lifecycle": [
            [0, {"integration-tests": "waiting", "bunk8s-results": "waiting"}],
            [200, {"integration-tests": "running", "bunk8s-results": "running"}],
            [1500, {"integration-tests": {"terminated": 1}}]
          ],
          "volumes": {"integration-tests": {"report.txt": "b2sK"}}
        }
      },
      "errors": [
        {"operation": "delete_pod", "namespace": "bunk8s-fe", "pod": "test-runner-pod",
         "kind": "Forbidden", "times": 1}
      ]
    }

Lifecycle delays are milliseconds since the previous entry; states not named
in an entry keep their previous value. Pods without a script start all
containers, then terminate every test container with exit code 0. Volume
contents are base64 file maps keyed by test container name.

An injected error fires on the named call. For watch_pod it can instead
break an open stream: ``"afterEvents": n`` after n events, or ``"at": s``
once the pod's clock reaches s seconds, moving the clock there first.

Time is virtual and kept per pod: a watch advances only that pod's clock, so
timeouts cost no wall-clock time and never leak between pods.
"""

import base64
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from cluster import (
    RUNNING,
    SIDECAR_NAME,
    WAITING,
    ClusterBackend,
    ClusterError,
    ContainerState,
    ErrorKind,
    PodBlueprint,
    PodPhase,
    WatchEvent,
    pack_tree,
    sidecar_path,
    terminated,
)

logger = logging.getLogger(__name__)

DEFAULT_START_MS = 100
DEFAULT_RUN_MS = 1000


@dataclass(frozen=True)
class Call:
    operation: str
    namespace: str
    pod_name: str = ""


@dataclass
class _InjectedError:
    operation: str
    kind: ErrorKind
    namespace: Optional[str] = None
    pod: Optional[str] = None
    times: Optional[int] = None
    after_events: int = 0
    at: Optional[float] = None
    detail: str = "injected by scenario"

    @property
    def mid_stream(self) -> bool:
        return self.after_events > 0 or self.at is not None

    def matches(self, operation: str, namespace: str, pod: str) -> bool:
        if self.operation != operation or self.times == 0:
            return False
        if self.namespace is not None and self.namespace != namespace:
            return False
        return self.pod is None or self.pod == pod


@dataclass
class _FakePod:
    blueprint: Optional[PodBlueprint]
    timeline: list[tuple[float, dict[str, ContainerState]]] = field(default_factory=list)
    volumes: dict[str, dict[str, bytes]] = field(default_factory=dict)
    clock: float = 0.0

    def state_at(self, instant: float) -> dict[str, ContainerState]:
        current = self.timeline[0][1]
        for at, states in self.timeline:
            if at > instant:
                break
            current = states
        return current


def _parse_state(raw) -> ContainerState:
    if isinstance(raw, dict) and "terminated" in raw:
        return terminated(int(raw["terminated"]))
    if raw == "waiting":
        return WAITING
    if raw == "running":
        return RUNNING
    raise ValueError(f"unknown container state {raw!r}")


def _dump_state(state: ContainerState):
    if state.terminated:
        return {"terminated": state.exit_code}
    return state.kind.value.lower()


def pod_phase(states: dict[str, ContainerState]) -> PodPhase:
    values = list(states.values())
    if all(s == WAITING for s in values):
        return PodPhase.PENDING
    if all(s.terminated for s in values):
        return PodPhase.SUCCEEDED if all(s.exit_code == 0 for s in values) else PodPhase.FAILED
    return PodPhase.RUNNING


def _default_lifecycle(blueprint: PodBlueprint) -> list:
    names = blueprint.container_names
    return [
        [0, {name: "waiting" for name in names}],
        [DEFAULT_START_MS, {name: "running" for name in names}],
        [DEFAULT_RUN_MS, {name: {"terminated": 0} for name in blueprint.test_container_names}],
    ]


def _build_timeline(key: str, blueprint: PodBlueprint, lifecycle: list) -> list:
    names = blueprint.container_names
    states = {name: WAITING for name in names}
    timeline = [(0.0, dict(states))]
    elapsed_ms = 0
    for delay_ms, changes in lifecycle:
        if delay_ms < 0:
            raise ValueError(f"scenario pod {key}: negative delay {delay_ms}")
        elapsed_ms += delay_ms
        for name, raw in changes.items():
            if name not in states:
                raise ValueError(f"scenario pod {key}: unknown container {name!r}")
            new_state = _parse_state(raw)
            if states[name].terminated and new_state != states[name]:
                raise ValueError(f"scenario pod {key}: container {name!r} leaves Terminated")
            states[name] = new_state
        at = elapsed_ms / 1000.0
        if timeline[-1][0] == at:
            timeline[-1] = (at, dict(states))
        elif timeline[-1][1] != states:
            timeline.append((at, dict(states)))
    return timeline


class FakeCluster(ClusterBackend):
    """Scenario-driven stand-in for the Kubernetes API."""

    def __init__(self, scenario: Optional[dict] = None):
        scenario = scenario or {}
        self._lock = threading.RLock()
        self._namespaces = set(scenario.get("namespaces", []))
        self._scripts = scenario.get("pods", {})
        self._errors = [
            _InjectedError(
                operation=e["operation"],
                kind=ErrorKind(e["kind"]),
                namespace=e.get("namespace"),
                pod=e.get("pod"),
                times=e.get("times"),
                after_events=e.get("afterEvents", 0),
                at=e.get("at"),
                detail=e.get("detail", "injected by scenario"),
            )
            for e in scenario.get("errors", [])
        ]
        self._pods: dict[tuple[str, str], _FakePod] = {}
        for key in scenario.get("existingPods", []):
            namespace, pod_name = key.split("/", 1)
            self._pods[(namespace, pod_name)] = _FakePod(blueprint=None, timeline=[(0.0, {})])
        self.call_log: list[Call] = []

    @classmethod
    def from_file(cls, path: Path) -> "FakeCluster":
        with open(path) as f:
            return cls(json.load(f))

    def calls(self, operation: str) -> list[tuple[str, str]]:
        """(namespace, pod) pairs of every logged call to ``operation``."""
        with self._lock:
            return [(c.namespace, c.pod_name) for c in self.call_log if c.operation == operation]

    def add_namespace(self, namespace: str) -> None:
        with self._lock:
            self._namespaces.add(namespace)

    def delete_namespace(self, namespace: str) -> None:
        with self._lock:
            self._namespaces.discard(namespace)
            for key in [k for k in self._pods if k[0] == namespace]:
                del self._pods[key]

    def write_file(self, namespace: str, pod_name: str, container_name: str, relative_path: str, data: bytes) -> None:
        """Place a file in a test container's result directory."""
        with self._lock:
            pod = self._require_pod(namespace, pod_name)
            pod.volumes.setdefault(container_name, {})[relative_path] = data

    def _record(self, operation: str, namespace: str, pod_name: str = "") -> None:
        with self._lock:
            self.call_log.append(Call(operation, namespace, pod_name))
            for error in self._errors:
                if not error.mid_stream and error.matches(operation, namespace, pod_name):
                    if error.times is not None:
                        error.times -= 1
                    raise ClusterError(error.kind, f"{namespace}/{pod_name}".rstrip("/"), error.detail)

    def _require_pod(self, namespace: str, pod_name: str) -> _FakePod:
        pod = self._pods.get((namespace, pod_name))
        if pod is None:
            raise ClusterError(ErrorKind.NOT_FOUND, f"pods/{namespace}/{pod_name}", "pod not found")
        return pod

    def namespace_exists(self, namespace: str) -> bool:
        self._record("namespace_exists", namespace)
        with self._lock:
            return namespace in self._namespaces

    def pod_exists(self, namespace: str, pod_name: str) -> bool:
        self._record("pod_exists", namespace, pod_name)
        with self._lock:
            return (namespace, pod_name) in self._pods

    def create_pod(self, blueprint: PodBlueprint) -> None:
        key = (blueprint.namespace, blueprint.pod_name)
        self._record("create_pod", *key)
        with self._lock:
            if blueprint.namespace not in self._namespaces:
                raise ClusterError(ErrorKind.NOT_FOUND, f"namespaces/{blueprint.namespace}", "namespace not found")
            if key in self._pods:
                raise ClusterError(ErrorKind.CONFLICT, f"pods/{blueprint.namespace}/{blueprint.pod_name}", "already exists")
            script_key = f"{blueprint.namespace}/{blueprint.pod_name}"
            script = self._scripts.get(script_key, {})
            lifecycle = script.get("lifecycle") or _default_lifecycle(blueprint)
            volumes = {
                container: {path: base64.b64decode(content) for path, content in files.items()}
                for container, files in script.get("volumes", {}).items()
            }
            self._pods[key] = _FakePod(
                blueprint=blueprint,
                timeline=_build_timeline(script_key, blueprint, lifecycle),
                volumes=volumes,
            )
        logger.debug(f"fake cluster created pod {script_key}")

    def _event(self, namespace: str, pod_name: str, pod: _FakePod, at: float, states: dict) -> WatchEvent:
        return WatchEvent(
            timestamp=at,
            pod_name=pod_name,
            namespace=namespace,
            container_states=dict(states),
            pod_phase=pod_phase(states),
        )

    def _stream_breaker(self, namespace: str, pod_name: str) -> Optional[_InjectedError]:
        with self._lock:
            for error in self._errors:
                if error.mid_stream and error.matches("watch_pod", namespace, pod_name):
                    return error
        return None

    def _trip(self, breaker: _InjectedError, namespace: str, pod_name: str, pod: _FakePod, at: float) -> ClusterError:
        if breaker.times is not None:
            breaker.times -= 1
        pod.clock = max(pod.clock, at)
        return ClusterError(breaker.kind, f"pods/{namespace}/{pod_name}", breaker.detail)

    def watch_pod(self, namespace: str, pod_name: str, timeout_seconds: float) -> Iterator[WatchEvent]:
        self._record("watch_pod", namespace, pod_name)
        with self._lock:
            pod = self._require_pod(namespace, pod_name)
            start = pod.clock
        return self._stream(namespace, pod_name, pod, start, start + timeout_seconds)

    def now(self, namespace: str, pod_name: str) -> float:
        with self._lock:
            pod = self._pods.get((namespace, pod_name))
            return pod.clock if pod is not None else 0.0

    def _stream(self, namespace: str, pod_name: str, pod: _FakePod, start: float, end: float) -> Iterator[WatchEvent]:
        breaker = self._stream_breaker(namespace, pod_name)
        break_at = None
        if breaker is not None and breaker.at is not None and start <= breaker.at < end:
            break_at = breaker.at
        yielded = 0
        pending = [(start, pod.state_at(start))] + [(at, s) for at, s in pod.timeline if start < at <= end]
        for at, states in pending:
            with self._lock:
                if (namespace, pod_name) not in self._pods:
                    raise ClusterError(ErrorKind.NOT_FOUND, f"pods/{namespace}/{pod_name}", "pod deleted during watch")
                if breaker is not None and breaker.times != 0:
                    if break_at is not None and at > break_at:
                        raise self._trip(breaker, namespace, pod_name, pod, break_at)
                    if breaker.at is None and yielded >= breaker.after_events:
                        raise self._trip(breaker, namespace, pod_name, pod, at)
                pod.clock = max(pod.clock, at)
            yield self._event(namespace, pod_name, pod, at, states)
            yielded += 1
        with self._lock:
            if break_at is not None and breaker.times != 0:
                raise self._trip(breaker, namespace, pod_name, pod, break_at)
            pod.clock = max(pod.clock, end)

    def read_container_file(self, namespace: str, pod_name: str, container_name: str, path: str) -> bytes:
        self._record("read_container_file", namespace, pod_name)
        with self._lock:
            pod = self._require_pod(namespace, pod_name)
            if pod.blueprint is None or container_name not in pod.blueprint.container_names:
                raise ClusterError(ErrorKind.NOT_FOUND, f"pods/{namespace}/{pod_name}/{container_name}", "container not found")
            state = pod.state_at(pod.clock).get(container_name)
            if state != RUNNING:
                raise ClusterError(
                    ErrorKind.NOT_FOUND,
                    f"pods/{namespace}/{pod_name}/{container_name}",
                    f"container is {state}, not Running",
                )
            volume, inner = self._resolve(pod.blueprint, container_name, path)
            if volume is None:
                raise ClusterError(ErrorKind.NOT_FOUND, path, "no such file or directory")
            files = pod.volumes.get(volume, {})
            if inner in files:
                return files[inner]
            prefix = f"{inner}/" if inner else ""
            below = {name[len(prefix):]: data for name, data in files.items() if name.startswith(prefix)}
            if not below and inner:
                raise ClusterError(ErrorKind.NOT_FOUND, path, "no such file or directory")
            return pack_tree(below)

    @staticmethod
    def _resolve(blueprint: PodBlueprint, container_name: str, path: str) -> tuple[Optional[str], str]:
        """Map an in-container path to (volume key, path inside it)."""
        path = path.rstrip("/") or "/"
        if container_name == SIDECAR_NAME:
            roots = {sidecar_path(c): c for c in blueprint.test_container_names}
        else:
            mount = next(m for c in blueprint.test_containers if c.name == container_name for m in c.mounts)
            roots = {mount.mount_path.rstrip("/"): container_name}
        for root, volume in roots.items():
            if path == root:
                return volume, ""
            if path.startswith(root + "/"):
                return volume, path[len(root) + 1:]
        return None, ""

    def delete_pod(self, namespace: str, pod_name: str) -> None:
        self._record("delete_pod", namespace, pod_name)
        with self._lock:
            self._pods.pop((namespace, pod_name), None)


def scenario_for(
    run,
    exit_codes: Optional[dict[tuple[str, str, str], Optional[int]]] = None,
    files: Optional[dict[tuple[str, str, str], dict[str, bytes]]] = None,
    run_ms: int = DEFAULT_RUN_MS,
    extra_namespaces: tuple[str, ...] = (),
) -> dict:
    """Build a scenario for a TestRunConfig.

    ``exit_codes`` maps (namespace, pod, container) to an exit code, or None for
    a container that never terminates; unlisted containers exit 0. ``files``
    replaces the default ``results.log`` each container writes.
    """
    exit_codes = exit_codes or {}
    files = files or {}
    scenario = {"namespaces": sorted(set(run.namespaces) | set(extra_namespaces)), "pods": {}}
    for pod in run.pods:
        names = [c.container_name for c in pod.containers]
        finished = {}
        volumes = {}
        for name in names:
            key = (pod.namespace, pod.pod_name, name)
            code = exit_codes.get(key, 0)
            if code is not None:
                finished[name] = terminated(code)
            content = files.get(key, {"results.log": f"{name}: exit {code}\n".encode()})
            volumes[name] = {path: base64.b64encode(data).decode("ascii") for path, data in content.items()}
        scenario["pods"][f"{pod.namespace}/{pod.pod_name}"] = {
            "lifecycle": [
                [0, {name: "waiting" for name in names + [SIDECAR_NAME]}],
                [DEFAULT_START_MS, {name: "running" for name in names + [SIDECAR_NAME]}],
                [run_ms, {name: _dump_state(state) for name, state in finished.items()}],
            ],
            "volumes": volumes,
        }
    return scenario
