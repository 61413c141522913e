"""Cluster backend abstraction.

The workflow needs six primitives from the Kubernetes control plane. Two
backends implement them: ``kube_cluster.KubeCluster`` talks to a real API
server, ``fake_cluster.FakeCluster`` keeps an in-process cluster with scripted
pod lifecycles and a virtual clock.
"""

import io
import tarfile
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import PurePosixPath
from typing import Iterator, Optional

SIDECAR_NAME = "bunk8s-results"
SIDECAR_MOUNT_ROOT = "/results"
RESULT_VOLUME = "bunk8s-results"
RUN_ID_LABEL = "bunk8s/run-id"
RESTART_POLICY = "Never"


class ErrorKind(str, Enum):
    NOT_FOUND = "NotFound"
    CONFLICT = "Conflict"
    FORBIDDEN = "Forbidden"
    TIMEOUT = "Timeout"
    TRANSPORT = "Transport"
    PROTOCOL = "Protocol"


class ClusterError(Exception):
    """A failed control-plane call."""

    def __init__(self, kind: ErrorKind, resource: str, detail: str = ""):
        self.kind = ErrorKind(kind)
        self.resource = resource
        self.detail = detail
        super().__init__(f"{self.kind.value} {resource}: {detail}" if detail else f"{self.kind.value} {resource}")


class StateKind(str, Enum):
    WAITING = "Waiting"
    RUNNING = "Running"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class ContainerState:
    kind: StateKind
    exit_code: Optional[int] = None

    @property
    def terminated(self) -> bool:
        return self.kind == StateKind.TERMINATED

    def __str__(self) -> str:
        if self.terminated:
            return f"Terminated({self.exit_code})"
        return self.kind.value


WAITING = ContainerState(StateKind.WAITING)
RUNNING = ContainerState(StateKind.RUNNING)


def terminated(exit_code: int) -> ContainerState:
    return ContainerState(StateKind.TERMINATED, exit_code)


class PodPhase(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class WatchEvent:
    """One observed state of a pod.

    ``timestamp`` is a monotonic instant in seconds; only differences between
    timestamps of the same pod are meaningful.
    """

    timestamp: float
    pod_name: str
    namespace: str
    container_states: dict[str, ContainerState]
    pod_phase: PodPhase


@dataclass(frozen=True)
class VolumeMount:
    mount_path: str
    sub_path: str


@dataclass(frozen=True)
class ContainerBlueprint:
    name: str
    image: str
    command: tuple[str, ...] = ()
    args: tuple[str, ...] = ()
    mounts: tuple[VolumeMount, ...] = ()


@dataclass(frozen=True)
class PodBlueprint:
    """A cluster-agnostic description of one test runner pod."""

    pod_name: str
    namespace: str
    test_containers: tuple[ContainerBlueprint, ...]
    sidecar: ContainerBlueprint
    result_volume_name: str = RESULT_VOLUME
    restart_policy: str = RESTART_POLICY
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def container_names(self) -> list[str]:
        return [c.name for c in self.test_containers] + [self.sidecar.name]

    @property
    def test_container_names(self) -> list[str]:
        return [c.name for c in self.test_containers]

    def to_manifest(self) -> dict:
        """Kubernetes v1 Pod object for this blueprint."""

        def container(c: ContainerBlueprint) -> dict:
            body = {
                "name": c.name,
                "image": c.image,
                "volumeMounts": [
                    {"name": self.result_volume_name, "mountPath": m.mount_path, "subPath": m.sub_path}
                    for m in c.mounts
                ],
            }
            # No command means the image's own entrypoint is kept.
            if c.command:
                body["command"] = list(c.command)
            if c.args:
                body["args"] = list(c.args)
            return body

        return {
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {
                "name": self.pod_name,
                "namespace": self.namespace,
                "labels": dict(self.labels),
            },
            "spec": {
                "restartPolicy": self.restart_policy,
                "containers": [container(c) for c in self.test_containers] + [container(self.sidecar)],
                "volumes": [{"name": self.result_volume_name, "emptyDir": {}}],
            },
        }


def sidecar_path(container_name: str) -> str:
    """Where the sidecar sees a test container's result directory."""
    return f"{SIDECAR_MOUNT_ROOT}/{container_name}"


class ClusterBackend(ABC):
    """The six control-plane primitives the workflow uses, plus the event clock.

    Instances may be shared across threads; each watch stream has a single
    consumer.
    """

    @abstractmethod
    def namespace_exists(self, namespace: str) -> bool:
        ...

    @abstractmethod
    def pod_exists(self, namespace: str, pod_name: str) -> bool:
        ...

    @abstractmethod
    def create_pod(self, blueprint: PodBlueprint) -> None:
        ...

    @abstractmethod
    def watch_pod(self, namespace: str, pod_name: str, timeout_seconds: float) -> Iterator[WatchEvent]:
        """Yield the pod's current state, then every transition.

        The stream ends normally once ``timeout_seconds`` have elapsed since it
        was opened; a stream that breaks earlier raises ClusterError(Transport).
        """

    @abstractmethod
    def now(self, namespace: str, pod_name: str) -> float:
        """The current instant on the clock that stamps this pod's watch events."""

    @abstractmethod
    def read_container_file(self, namespace: str, pod_name: str, container_name: str, path: str) -> bytes:
        """Bytes of a file, or a deterministic tar archive when ``path`` is a directory."""

    @abstractmethod
    def delete_pod(self, namespace: str, pod_name: str) -> None:
        """Delete a pod; deleting an absent pod succeeds."""


def _safe_member_name(name: str) -> str:
    path = PurePosixPath(name)
    parts = [p for p in path.parts if p not in ("", ".")]
    if path.is_absolute() or ".." in parts or not parts:
        raise ValueError(f"unsafe archive member {name!r}")
    return "/".join(parts)


def pack_tree(files: dict[str, bytes]) -> bytes:
    """Deterministic tar archive of relative path -> bytes."""
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.PAX_FORMAT) as archive:
        for name in sorted(files):
            data = files[name]
            info = tarfile.TarInfo(_safe_member_name(name))
            info.size = len(data)
            info.mode = 0o644
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            archive.addfile(info, io.BytesIO(data))
    return buffer.getvalue()


def unpack_tree(archive: bytes) -> dict[str, bytes]:
    """Regular files of a tar archive as relative path -> bytes."""
    files = {}
    with tarfile.open(fileobj=io.BytesIO(archive), mode="r:*") as tar:
        for member in tar.getmembers():
            if not member.isfile():
                continue
            extracted = tar.extractfile(member)
            files[_safe_member_name(member.name)] = extracted.read() if extracted else b""
    return files
