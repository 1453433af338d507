"""Out-of-process backend adapter speaking line-delimited JSON.

Protocol: one JSON object per line on the child's stdin,
``{"op": <name>, "args": {...}}``, answered by one JSON line
``{"ok": true, "result": ...}`` or ``{"ok": false, "error": "..."}``.
"""

from __future__ import annotations

import json
import subprocess

import numpy as np

from ..types import (
    BackendDescriptor,
    BackendKind,
    BackendUnavailableError,
    EmbeddingVector,
    ImageTensor,
    ScoreVector,
)
from .interfaces import CaptionerBackend, ClassifierBackend, SentenceEmbedderBackend


class JsonLineClient:
    """Owns the child process and the request/response framing."""

    def __init__(self, command: list[str]):
        self.command = list(command)
        try:
            self.proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
            )
        except OSError as exc:
            raise BackendUnavailableError(f"cannot start adapter {self.command}: {exc}") from exc

    def call(self, op: str, **args):
        if self.proc.poll() is not None:
            raise BackendUnavailableError(f"adapter {self.command} exited with {self.proc.returncode}")
        try:
            self.proc.stdin.write(json.dumps({"op": op, "args": args}) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise BackendUnavailableError(f"adapter {self.command} pipe failure: {exc}") from exc
        if not line:
            raise BackendUnavailableError(f"adapter {self.command} closed its output stream")
        reply = json.loads(line)
        if not reply.get("ok"):
            raise BackendUnavailableError(f"adapter error for op {op!r}: {reply.get('error')}")
        return reply["result"]

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


def _image_payload(image: ImageTensor) -> dict:
    return {"id": image.id, "data": image.data.tolist()}


class SubprocessCaptioner(CaptionerBackend):
    def __init__(self, command: list[str], name: str = "subprocess-captioner", seed: int = 0):
        self.client = JsonLineClient(command)
        self._descriptor = BackendDescriptor(BackendKind.CAPTIONER, name, False, seed)

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def caption(self, image: ImageTensor, min_words: int = 20, repetition_penalty: float = 1.5) -> str:
        text = self.client.call(
            "caption", image=_image_payload(image),
            min_words=min_words, repetition_penalty=repetition_penalty,
        )
        if not text or len(text.split()) < min_words:
            raise BackendUnavailableError("adapter returned an empty or too-short caption")
        return text


class SubprocessSentenceEmbedder(SentenceEmbedderBackend):
    def __init__(self, command: list[str], name: str = "subprocess-embedder", seed: int = 0):
        self.client = JsonLineClient(command)
        self._descriptor = BackendDescriptor(BackendKind.SENTENCE_EMBEDDER, name, False, seed)

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def embed(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(np.asarray(self.client.call("embed", text=text), dtype=np.float64))


class SubprocessClassifier(ClassifierBackend):
    """Inference-only classifier adapter; training surfaces are unsupported."""

    def __init__(self, command: list[str], name: str = "subprocess-classifier", seed: int = 0):
        self.client = JsonLineClient(command)
        self._descriptor = BackendDescriptor(BackendKind.CLASSIFIER, name, False, seed)
        self._class_names: tuple[str, ...] | None = None

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    @property
    def class_names(self) -> tuple[str, ...]:
        if self._class_names is None:
            self._class_names = tuple(self.client.call("class_names"))
        return self._class_names

    def classify(self, image: ImageTensor) -> ScoreVector:
        scores = self.client.call("classify", image=_image_payload(image))
        return ScoreVector(np.asarray(scores, dtype=np.float64), self.class_names)

    def get_parameters(self):
        raise BackendUnavailableError("subprocess classifier does not expose parameters")

    def set_parameters(self, params):
        raise BackendUnavailableError("subprocess classifier does not expose parameters")

    def head_gradient(self, images, labels):
        raise BackendUnavailableError("subprocess classifier does not support training")
