"""Run-configuration document handling.

The launcher takes one YAML document describing where the coordinator lives
(``launcherConfig``) and which test runner pods it should deploy
(``coordinatorConfig``). This module turns that document into immutable,
validated models shared by launcher and coordinator, and renders them back.

Units: ``testTimeout`` is in seconds, counted from the first observed event of
the pod, which the API server reports as soon as the pod exists.
"""

import hashlib
import re
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, StrictInt, StrictStr
from pydantic import ValidationError as PydanticValidationError
from pydantic import field_validator, model_validator

DNS1123_LABEL = re.compile(r"^[a-z0-9]([-a-z0-9]*[a-z0-9])?$")
DNS1123_MAX_LENGTH = 63


class ConfigError(Exception):
    """Base class for run-configuration errors."""


class ConfigSyntaxError(ConfigError):
    """The document is not well-formed YAML."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"malformed YAML{where}: {message}")


class SchemaError(ConfigError):
    """A required field is missing, unknown, or has the wrong type."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<document>'}: {message}")


class ConfigValidationError(ConfigError):
    """A field is well-typed but breaks a rule."""

    def __init__(self, path: str, rule: str):
        self.path = path
        self.rule = rule
        super().__init__(f"{path or '<document>'}: {rule}")


def is_dns1123_label(value: str) -> bool:
    return len(value) <= DNS1123_MAX_LENGTH and bool(DNS1123_LABEL.match(value))


def _require_label(value: str, what: str) -> str:
    if not is_dns1123_label(value):
        raise ValueError(
            f"{what} {value!r} is not a DNS-1123 label "
            f"(lowercase alphanumerics and '-', at most {DNS1123_MAX_LENGTH} chars, "
            "starting and ending alphanumeric)"
        )
    return value


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class LauncherConfig(_Model):
    """How the launcher reaches the coordinator."""

    coordinator_host: StrictStr = Field(alias="coordinatorIp")
    coordinator_port: StrictInt = Field(alias="coordinatorPort")
    cert_file: Optional[StrictStr] = Field(default=None, alias="certFile")

    @field_validator("coordinator_host")
    @classmethod
    def _host_not_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("coordinatorIp must not be empty")
        return value

    @field_validator("coordinator_port")
    @classmethod
    def _port_in_range(cls, value: int) -> int:
        if not 1 <= value <= 65535:
            raise ValueError(f"coordinatorPort {value} is outside 1-65535")
        return value

    @field_validator("cert_file")
    @classmethod
    def _cert_not_empty(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and not value.strip():
            raise ValueError("certFile must not be empty when present")
        return value


class TestContainerSpec(_Model):
    """One test runner container inside a pod."""

    __test__ = False

    container_name: StrictStr = Field(alias="containerName")
    image: StrictStr
    startup_commands: list[StrictStr] = Field(default_factory=list, alias="startupCommands")
    startup_command_args: list[StrictStr] = Field(default_factory=list, alias="startupCommandsArgs")
    test_result_path: StrictStr = Field(alias="testResultPath")

    @field_validator("startup_commands", "startup_command_args", mode="before")
    @classmethod
    def _null_list_is_empty(cls, value):
        # "startupCommands:" with no value parses as null
        return [] if value is None else value

    @field_validator("container_name")
    @classmethod
    def _container_label(cls, value: str) -> str:
        return _require_label(value, "containerName")

    @field_validator("image")
    @classmethod
    def _image_not_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("image must not be empty")
        return value

    @field_validator("test_result_path")
    @classmethod
    def _absolute_result_path(cls, value: str) -> str:
        if not value.startswith("/"):
            raise ValueError(f"testResultPath {value!r} must be an absolute path")
        if value.strip("/") == "":
            raise ValueError("testResultPath must not be the filesystem root")
        return value

    @model_validator(mode="after")
    def _args_need_commands(self) -> "TestContainerSpec":
        if self.startup_command_args and not self.startup_commands:
            raise ValueError(
                f"container {self.container_name!r}: startupCommandsArgs requires startupCommands"
            )
        return self


class TestRunnerPodSpec(_Model):
    """One test runner pod and the containers it bundles."""

    __test__ = False

    pod_name: StrictStr = Field(alias="podName")
    namespace: StrictStr
    test_timeout: StrictInt = Field(alias="testTimeout")
    containers: list[TestContainerSpec]

    @field_validator("pod_name")
    @classmethod
    def _pod_label(cls, value: str) -> str:
        return _require_label(value, "podName")

    @field_validator("namespace")
    @classmethod
    def _namespace_label(cls, value: str) -> str:
        return _require_label(value, "namespace")

    @field_validator("test_timeout")
    @classmethod
    def _positive_timeout(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"testTimeout must be at least 1 second, got {value}")
        return value

    @model_validator(mode="after")
    def _distinct_containers(self) -> "TestRunnerPodSpec":
        if not self.containers:
            raise ValueError(f"pod {self.pod_name!r} must define at least one container")
        seen = set()
        for container in self.containers:
            if container.container_name in seen:
                raise ValueError(
                    f"pod {self.pod_name!r}: duplicate containerName {container.container_name!r}"
                )
            seen.add(container.container_name)
        return self

    @property
    def key(self) -> tuple[str, str]:
        return (self.namespace, self.pod_name)


class TestRunConfig(_Model):
    """Everything the coordinator needs to deploy one run."""

    __test__ = False

    pods: list[TestRunnerPodSpec] = Field(alias="testRunnerPods")

    @model_validator(mode="after")
    def _distinct_pods(self) -> "TestRunConfig":
        if not self.pods:
            raise ValueError("testRunnerPods must define at least one pod")
        seen = set()
        for pod in self.pods:
            if pod.key in seen:
                raise ValueError(
                    f"duplicate test runner pod {pod.pod_name!r} in namespace {pod.namespace!r}"
                )
            seen.add(pod.key)
        return self

    @property
    def namespaces(self) -> list[str]:
        """Distinct namespaces in request order."""
        return list(dict.fromkeys(pod.namespace for pod in self.pods))

    @property
    def max_timeout(self) -> int:
        return max(pod.test_timeout for pod in self.pods)


class RunDocument(_Model):
    launcher_config: LauncherConfig = Field(alias="launcherConfig")
    coordinator_config: TestRunConfig = Field(alias="coordinatorConfig")


def _error_path(loc: tuple) -> str:
    parts = []
    for item in loc:
        if isinstance(item, int):
            parts.append(f"[{item}]")
        else:
            parts.append(f".{item}" if parts else str(item))
    return "".join(parts)


def _translate(exc: PydanticValidationError) -> ConfigError:
    errors = exc.errors()
    # Structural problems win over rule violations so one class is reported.
    structural = [e for e in errors if e["type"] != "value_error"]
    if structural:
        first = structural[0]
        return SchemaError(_error_path(first["loc"]), first["msg"])
    first = errors[0]
    cause = first.get("ctx", {}).get("error")
    return ConfigValidationError(_error_path(first["loc"]), str(cause) if cause else first["msg"])


def parse_config(document: str) -> tuple[LauncherConfig, TestRunConfig]:
    """Parse a run-configuration document.

    Raises ConfigSyntaxError, SchemaError or ConfigValidationError; never returns a
    partially populated result.
    """
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigSyntaxError(problem, line) from e

    if data is None:
        raise SchemaError("", "document is empty")
    if not isinstance(data, dict):
        raise SchemaError("", f"expected a mapping at the top level, got {type(data).__name__}")

    try:
        parsed = RunDocument.model_validate(data)
    except PydanticValidationError as e:
        raise _translate(e) from e
    return parsed.launcher_config, parsed.coordinator_config


def run_to_dict(run: TestRunConfig) -> dict:
    """Canonical mapping form of a run, with empty optional lists omitted."""
    pods = []
    for pod in run.pods:
        containers = []
        for container in pod.containers:
            entry = {"containerName": container.container_name, "image": container.image}
            if container.startup_commands:
                entry["startupCommands"] = list(container.startup_commands)
            if container.startup_command_args:
                entry["startupCommandsArgs"] = list(container.startup_command_args)
            entry["testResultPath"] = container.test_result_path
            containers.append(entry)
        pods.append({
            "podName": pod.pod_name,
            "namespace": pod.namespace,
            "testTimeout": pod.test_timeout,
            "containers": containers,
        })
    return {"testRunnerPods": pods}


def render_config(launcher: LauncherConfig, run: TestRunConfig) -> str:
    """Render a document that parse_config maps back to equal values."""
    launcher_section = {
        "coordinatorIp": launcher.coordinator_host,
        "coordinatorPort": launcher.coordinator_port,
    }
    if launcher.cert_file is not None:
        launcher_section["certFile"] = launcher.cert_file
    document = {"launcherConfig": launcher_section, "coordinatorConfig": run_to_dict(run)}
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=False, allow_unicode=True)


def config_digest(launcher: LauncherConfig, run: TestRunConfig) -> str:
    """SHA-256 hex digest of the canonical rendering."""
    return hashlib.sha256(render_config(launcher, run).encode("utf-8")).hexdigest()
