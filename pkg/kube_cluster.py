"""Kubernetes API backend built on the official client.

Maps the cluster primitives onto CoreV1Api:

    namespace_exists     read_namespace
    pod_exists           read_namespaced_pod
    create_pod           create_namespaced_pod
    watch_pod            Watch().stream(list_namespaced_pod, field_selector=metadata.name=...)
    read_container_file  connect_get_namespaced_pod_exec running tar in the container
    delete_pod           delete_namespaced_pod
"""

import json
import logging
import math
import posixpath
import re
import tarfile
import time
from typing import Callable, Iterator, Optional

import urllib3
import websocket
from kubernetes import client
from kubernetes.client.exceptions import ApiException
from kubernetes.config import ConfigException, load_incluster_config, load_kube_config
from kubernetes.stream import stream
from kubernetes.stream.ws_client import ERROR_CHANNEL, STDERR_CHANNEL, STDOUT_CHANNEL
from kubernetes.watch import Watch

from cluster import (
    RUNNING,
    WAITING,
    ClusterBackend,
    ClusterError,
    ContainerState,
    ErrorKind,
    PodBlueprint,
    PodPhase,
    WatchEvent,
    pack_tree,
    terminated,
    unpack_tree,
)
from config import config

logger = logging.getLogger(__name__)

CONNECT_TIMEOUT = 10
REQUEST_TIMEOUT = 30
# Extra read time past the server-side watch timeout before the socket gives up.
WATCH_SLACK = 15
EXEC_POLL_SECONDS = 1

_STATUS_KINDS = {
    401: ErrorKind.FORBIDDEN,
    403: ErrorKind.FORBIDDEN,
    404: ErrorKind.NOT_FOUND,
    408: ErrorKind.TIMEOUT,
    504: ErrorKind.TIMEOUT,
}

_HANDSHAKE_STATUS = re.compile(r"Handshake status (\d{3})")


def load_core_api() -> client.CoreV1Api:
    """CoreV1Api from the pod's service account, or from kubeconfig outside a cluster."""
    try:
        load_incluster_config()
        logger.debug("Loaded in-cluster Kubernetes config")
    except ConfigException:
        try:
            load_kube_config(context=config.kube_context)
            logger.debug("Loaded kubeconfig")
        except ConfigException as e:
            raise ClusterError(
                ErrorKind.FORBIDDEN, "kubeconfig", f"no in-cluster service account and no usable kubeconfig: {e}"
            ) from e
    return client.CoreV1Api()


def _api_message(e: ApiException) -> str:
    try:
        return json.loads(e.body).get("message") or e.reason
    except (TypeError, ValueError, AttributeError):
        return str(e.reason)


def _cluster_error(e: ApiException, resource: str, conflict: bool = False) -> ClusterError:
    if not e.status:
        # The client reports connection and handshake failures with status 0.
        handshake = _HANDSHAKE_STATUS.search(str(e.reason))
        if handshake is None:
            return ClusterError(ErrorKind.TRANSPORT, resource, str(e.reason))
        status = int(handshake.group(1))
    else:
        status = e.status
    if status == 409 and conflict:
        kind = ErrorKind.CONFLICT
    else:
        kind = _STATUS_KINDS.get(status, ErrorKind.PROTOCOL)
    return ClusterError(kind, resource, f"HTTP {status}: {_api_message(e)}")


class KubeCluster(ClusterBackend):
    """Cluster backend talking to a real API server through CoreV1Api."""

    def __init__(
        self,
        api: Optional[client.CoreV1Api] = None,
        exec_stream: Callable = stream,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.api = api or load_core_api()
        self._exec_stream = exec_stream
        self._clock = clock

    def now(self, namespace: str, pod_name: str) -> float:
        return self._clock()

    def _call(self, resource: str, method: Callable, *args, conflict: bool = False, **kwargs):
        kwargs.setdefault("_request_timeout", (CONNECT_TIMEOUT, REQUEST_TIMEOUT))
        try:
            return method(*args, **kwargs)
        except ApiException as e:
            raise _cluster_error(e, resource, conflict) from e
        except (urllib3.exceptions.HTTPError, OSError) as e:
            raise ClusterError(ErrorKind.TRANSPORT, resource, str(e)) from e

    def _exists(self, resource: str, method: Callable, *args) -> bool:
        try:
            self._call(resource, method, *args)
        except ClusterError as e:
            if e.kind == ErrorKind.NOT_FOUND:
                return False
            raise
        return True

    def namespace_exists(self, namespace: str) -> bool:
        return self._exists(f"namespaces/{namespace}", self.api.read_namespace, namespace)

    def pod_exists(self, namespace: str, pod_name: str) -> bool:
        return self._exists(f"pods/{namespace}/{pod_name}", self.api.read_namespaced_pod, pod_name, namespace)

    def create_pod(self, blueprint: PodBlueprint) -> None:
        self._call(
            f"pods/{blueprint.namespace}/{blueprint.pod_name}",
            self.api.create_namespaced_pod,
            blueprint.namespace,
            blueprint.to_manifest(),
            conflict=True,
        )
        logger.info(f"Created pod {blueprint.namespace}/{blueprint.pod_name}")

    def delete_pod(self, namespace: str, pod_name: str) -> None:
        # A pod that is already gone counts as deleted.
        try:
            self._call(
                f"pods/{namespace}/{pod_name}",
                self.api.delete_namespaced_pod,
                pod_name,
                namespace,
                body=client.V1DeleteOptions(propagation_policy="Background"),
            )
        except ClusterError as e:
            if e.kind != ErrorKind.NOT_FOUND:
                raise

    def watch_pod(self, namespace: str, pod_name: str, timeout_seconds: float) -> Iterator[WatchEvent]:
        return self._watch(namespace, pod_name, timeout_seconds)

    def _watch(self, namespace: str, pod_name: str, timeout_seconds: float) -> Iterator[WatchEvent]:
        resource = f"pods/{namespace}/{pod_name}"
        deadline = self._clock() + timeout_seconds
        server_timeout = max(1, math.ceil(timeout_seconds))
        watcher = Watch()
        events = watcher.stream(
            self.api.list_namespaced_pod,
            namespace,
            field_selector=f"metadata.name={pod_name}",
            timeout_seconds=server_timeout,
            _request_timeout=(CONNECT_TIMEOUT, server_timeout + WATCH_SLACK),
        )
        finished: dict[str, ContainerState] = {}
        try:
            for event in events:
                if not event:
                    continue
                kind = event.get("type")
                if kind == "BOOKMARK":
                    continue
                if kind == "DELETED":
                    raise ClusterError(ErrorKind.NOT_FOUND, resource, "pod deleted during watch")
                yield self._to_event(namespace, pod_name, event.get("raw_object") or {}, finished)
        except ApiException as e:
            # 410 Gone: the watch window expired, the consumer re-establishes.
            if e.status == 410:
                raise ClusterError(ErrorKind.TRANSPORT, resource, f"watch expired: {e.reason}") from e
            raise _cluster_error(e, resource) from e
        except (urllib3.exceptions.HTTPError, OSError) as e:
            if self._clock() < deadline:
                raise ClusterError(ErrorKind.TRANSPORT, resource, f"watch stream broke: {e}") from e
            return
        finally:
            watcher.stop()
            events.close()
        if self._clock() < deadline - 1:
            raise ClusterError(ErrorKind.TRANSPORT, resource, "watch stream closed early")

    def _to_event(self, namespace: str, pod_name: str, pod: dict, finished: dict[str, ContainerState]) -> WatchEvent:
        spec_names = [c["name"] for c in pod.get("spec", {}).get("containers", [])]
        status = pod.get("status", {})
        states = {name: WAITING for name in spec_names}
        for entry in status.get("containerStatuses") or []:
            raw = entry.get("state") or {}
            if "terminated" in raw:
                states[entry["name"]] = terminated(int(raw["terminated"].get("exitCode", -1)))
            elif "running" in raw:
                states[entry["name"]] = RUNNING
            else:
                states[entry["name"]] = WAITING
        # A container never leaves Terminated within one stream.
        states.update(finished)
        finished.update({name: s for name, s in states.items() if s.terminated})
        try:
            phase = PodPhase(status.get("phase", "Unknown"))
        except ValueError:
            phase = PodPhase.UNKNOWN
        return WatchEvent(
            timestamp=self._clock(),
            pod_name=pod_name,
            namespace=namespace,
            container_states=states,
            pod_phase=phase,
        )

    def _exec(self, namespace: str, pod_name: str, container_name: str, command: list[str]) -> tuple[bytes, bytes, dict]:
        resource = f"pods/{namespace}/{pod_name}/{container_name}"
        try:
            resp = self._exec_stream(
                self.api.connect_get_namespaced_pod_exec,
                pod_name,
                namespace,
                container=container_name,
                command=command,
                stderr=True,
                stdin=False,
                stdout=True,
                tty=False,
                binary=True,
                _preload_content=False,
                _request_timeout=REQUEST_TIMEOUT,
            )
        except ApiException as e:
            raise _cluster_error(e, resource) from e
        except (websocket.WebSocketException, OSError) as e:
            raise ClusterError(ErrorKind.TRANSPORT, resource, f"exec connection failed: {e}") from e

        stdout, stderr = bytearray(), bytearray()
        try:
            while resp.is_open():
                resp.update(timeout=EXEC_POLL_SECONDS)
                stdout += _as_bytes(resp.read_channel(STDOUT_CHANNEL, timeout=0))
                stderr += _as_bytes(resp.read_channel(STDERR_CHANNEL, timeout=0))
            stdout += _as_bytes(resp.read_channel(STDOUT_CHANNEL, timeout=0))
            stderr += _as_bytes(resp.read_channel(STDERR_CHANNEL, timeout=0))
            raw_status = _as_bytes(resp.read_channel(ERROR_CHANNEL, timeout=0))
        except (websocket.WebSocketException, OSError) as e:
            raise ClusterError(ErrorKind.TRANSPORT, resource, f"exec stream broke: {e}") from e
        finally:
            resp.close()
        try:
            status = json.loads(raw_status) if raw_status else {}
        except ValueError as e:
            raise ClusterError(ErrorKind.PROTOCOL, resource, f"bad exec status: {e}") from e
        return bytes(stdout), bytes(stderr), status

    def read_container_file(self, namespace: str, pod_name: str, container_name: str, path: str) -> bytes:
        clean = posixpath.normpath(path)
        parent, base = posixpath.split(clean)
        stdout, stderr, status = self._exec(
            namespace, pod_name, container_name, ["tar", "cf", "-", "-C", parent or "/", base]
        )
        if status.get("status") == "Failure":
            message = stderr.decode("utf-8", "replace").strip() or status.get("message", "")
            if "No such file" in message or "not found" in message.lower():
                raise ClusterError(ErrorKind.NOT_FOUND, path, message)
            raise ClusterError(ErrorKind.PROTOCOL, path, message)

        try:
            files = unpack_tree(stdout)
        except (tarfile.TarError, ValueError) as e:
            raise ClusterError(ErrorKind.PROTOCOL, path, f"unreadable tar stream: {e}") from e
        if list(files) == [base]:
            return files[base]
        prefix = f"{base}/"
        return pack_tree({name[len(prefix):]: data for name, data in files.items() if name.startswith(prefix)})


def _as_bytes(data) -> bytes:
    if not data:
        return b""
    return data if isinstance(data, bytes) else data.encode("utf-8", "surrogateescape")
