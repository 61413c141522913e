"""Wire messages for the DeployTestRunner call.

Both messages travel as UTF-8 JSON with fixed camelCase field names and sorted
keys. The reply's encoded form is also what the launcher stores as reply.json.
"""

import json
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, StrictInt, StrictStr
from pydantic import ValidationError as PydanticValidationError
from pydantic import model_validator

from run_config import TestRunConfig, run_to_dict


class DecodeError(Exception):
    """Bytes that do not decode into a valid message."""

    def __init__(self, offset: int, reason: str):
        self.offset = offset
        self.reason = reason
        super().__init__(f"decode error at byte {offset}: {reason}")


class Verdict(str, Enum):
    PASSED = "PASSED"
    FAILED = "FAILED"
    NOT_RUN = "NOT_RUN"


class PodStatus(str, Enum):
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    TIMED_OUT = "TIMED_OUT"
    ERROR = "ERROR"


class ReplyCode(str, Enum):
    OK = "OK"
    ERR_NAMESPACE_MISSING = "ERR_NAMESPACE_MISSING"
    ERR_POD_CONFLICT = "ERR_POD_CONFLICT"
    ERR_CREATE_FAILED = "ERR_CREATE_FAILED"
    ERR_INTERNAL = "ERR_INTERNAL"


class _Message(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DeployRequest(_Message):
    run_id: StrictStr = Field(alias="runId", min_length=1)
    run: TestRunConfig


class ContainerResult(_Message):
    container_name: StrictStr = Field(alias="containerName")
    exit_code: Optional[StrictInt] = Field(default=None, alias="exitCode")
    result_path: StrictStr = Field(alias="resultPath")
    verdict: Verdict

    @classmethod
    def from_exit_code(cls, container_name: str, result_path: str, exit_code: Optional[int]) -> "ContainerResult":
        if exit_code is None:
            verdict = Verdict.NOT_RUN
        elif exit_code == 0:
            verdict = Verdict.PASSED
        else:
            verdict = Verdict.FAILED
        return cls(
            container_name=container_name,
            exit_code=exit_code,
            result_path=result_path,
            verdict=verdict,
        )

    @model_validator(mode="after")
    def _verdict_matches_exit_code(self) -> "ContainerResult":
        if (self.verdict == Verdict.PASSED) != (self.exit_code == 0):
            raise ValueError(f"container {self.container_name!r}: PASSED iff exitCode is 0")
        if (self.verdict == Verdict.NOT_RUN) != (self.exit_code is None):
            raise ValueError(f"container {self.container_name!r}: NOT_RUN iff exitCode is absent")
        return self


class PodResult(_Message):
    pod_name: StrictStr = Field(alias="podName")
    namespace: StrictStr
    sidecar_name: StrictStr = Field(alias="sidecarName")
    status: PodStatus
    containers: list[ContainerResult]
    message: StrictStr = ""

    @model_validator(mode="after")
    def _status_matches_verdicts(self) -> "PodResult":
        all_passed = bool(self.containers) and all(c.verdict == Verdict.PASSED for c in self.containers)
        if (self.status == PodStatus.SUCCEEDED) != all_passed:
            raise ValueError(f"pod {self.pod_name!r}: SUCCEEDED iff every container PASSED")
        if self.status == PodStatus.TIMED_OUT and not any(c.verdict == Verdict.NOT_RUN for c in self.containers):
            raise ValueError(f"pod {self.pod_name!r}: TIMED_OUT needs a NOT_RUN container")
        if self.status != PodStatus.ERROR and not self.sidecar_name:
            raise ValueError(f"pod {self.pod_name!r}: sidecarName is required for extraction")
        return self

    @property
    def key(self) -> tuple[str, str]:
        return (self.namespace, self.pod_name)


class DeployReply(_Message):
    run_id: StrictStr = Field(alias="runId")
    code: ReplyCode
    pods: list[PodResult] = Field(default_factory=list)
    detail: StrictStr = ""

    @model_validator(mode="after")
    def _pods_only_when_ok(self) -> "DeployReply":
        if self.code == ReplyCode.OK and not self.pods:
            raise ValueError("an OK reply must carry one result per requested pod")
        if self.code != ReplyCode.OK:
            if self.pods:
                raise ValueError(f"a {self.code.value} reply must not carry pod results")
            if not self.detail:
                raise ValueError(f"a {self.code.value} reply must name the offending resource")
        return self

    @property
    def all_passed(self) -> bool:
        return self.code == ReplyCode.OK and all(
            c.verdict == Verdict.PASSED for pod in self.pods for c in pod.containers
        )


def _dumps(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False).encode("utf-8") + b"\n"


def _loads(data: bytes):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DecodeError(e.start, f"invalid UTF-8: {e.reason}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise DecodeError(offset, e.msg) from e


def _validate(model: type[_Message], payload) -> _Message:
    if not isinstance(payload, dict):
        raise DecodeError(0, f"expected a JSON object, got {type(payload).__name__}")
    try:
        return model.model_validate(payload)
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        # Structural errors have no byte position; report the document start.
        raise DecodeError(0, f"{where or model.__name__}: {first['msg']}") from e


def encode_request(req: DeployRequest) -> bytes:
    return _dumps({"runId": req.run_id, "run": run_to_dict(req.run)})


def decode_request(data: bytes) -> DeployRequest:
    return _validate(DeployRequest, _loads(data))


def encode_reply(rep: DeployReply) -> bytes:
    return _dumps(rep.model_dump(mode="json", by_alias=True))


def decode_reply(data: bytes) -> DeployReply:
    return _validate(DeployReply, _loads(data))
