"""Subprocess adapters for external recognizers and speaker encoders.

An adapter is any external program that speaks one JSON object per line on
stdin/stdout. Requests look like {"id": "...", "audio_path": "..."}; the
program answers each with {"id": "...", "text": "..."} (transcriber) or
{"id": "...", "embedding": [...]} (embedder). Responses may arrive in any
order — matching is by id — and each request id must be answered exactly
once. Any protocol violation, nonzero exit, or timeout raises AdapterError
so the caller can distinguish backend failures from data problems.
"""

import json
import subprocess

import numpy as np

from .errors import AdapterError

_DEFAULT_TIMEOUT = 300.0


class _SubprocessAdapter:
    def __init__(self, command, timeout=_DEFAULT_TIMEOUT):
        if isinstance(command, str):
            raise AdapterError(
                "adapter command must be an argv list, e.g. ['python3', 'my_adapter.py']")
        if not command:
            raise AdapterError("adapter command is empty")
        self.command = [str(c) for c in command]
        self.timeout = timeout

    def _exchange(self, requests):
        """Send request dicts, return {id: response dict}; one answer per id."""
        payload = "".join(json.dumps(r) + "\n" for r in requests)
        try:
            proc = subprocess.run(
                self.command, input=payload, capture_output=True,
                text=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            raise AdapterError(f"adapter command not found: {self.command[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise AdapterError(
                f"adapter timed out after {self.timeout:.0f}s: {self.command[0]}") from exc
        if proc.returncode != 0:
            detail = proc.stderr.strip().splitlines()
            tail = detail[-1] if detail else "(no stderr)"
            raise AdapterError(
                f"adapter exited with status {proc.returncode}: {tail}")

        responses = {}
        for line in proc.stdout.splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterError(f"adapter emitted invalid JSON: {line[:120]!r}") from exc
            if not isinstance(obj, dict) or "id" not in obj:
                raise AdapterError(f"adapter response has no id: {line[:120]!r}")
            key = str(obj["id"])
            if key in responses:
                raise AdapterError(f"adapter answered id {key!r} more than once")
            responses[key] = obj

        missing = [r["id"] for r in requests if r["id"] not in responses]
        if missing:
            raise AdapterError(f"adapter returned no response for ids {missing}")
        return responses

    def _one(self, audio_path):
        if audio_path is None:
            raise AdapterError(
                "subprocess adapters need audio_path (they cannot read in-memory audio)")
        return self._exchange([{"id": "0", "audio_path": str(audio_path)}])["0"]


class SubprocessTranscriber(_SubprocessAdapter):
    """Speech recognizer behind the JSON-lines subprocess protocol."""

    def transcribe(self, audio, audio_path=None):
        resp = self._one(audio_path)
        if "text" not in resp or not isinstance(resp["text"], str):
            raise AdapterError(f"transcriber response for id {resp.get('id')!r} has no text field")
        return resp["text"]


class SubprocessEmbedder(_SubprocessAdapter):
    """Speaker encoder behind the JSON-lines subprocess protocol."""

    def embed(self, audio, audio_path=None):
        resp = self._one(audio_path)
        vec = resp.get("embedding")
        if not isinstance(vec, list) or not vec:
            raise AdapterError(
                f"embedder response for id {resp.get('id')!r} has no embedding list")
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise AdapterError("embedder returned a non-finite or non-vector embedding")
        return arr
