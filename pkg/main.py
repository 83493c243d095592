# main.py
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
import uvicorn

logger = logging.getLogger(__name__)


class StubState:
    """Scripted replies served in order (wrapping), after any scripted failure statuses."""

    def __init__(self, responses: Sequence[str], fail_statuses: Sequence[int] = ()):
        self.responses: List[str] = list(responses)
        self.fail_statuses: List[int] = [int(s) for s in fail_statuses]
        self.calls = 0
        self.served = 0
        self.requests: List[Dict[str, Any]] = []


def load_responses(path: str | Path) -> List[str]:
    """
    JSON list of reply strings, or a directory of *.txt files (sorted by name).
    """
    p = Path(path)
    if p.is_dir():
        return [f.read_text(encoding="utf-8") for f in sorted(p.glob("*.txt"))]
    data = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise ValueError(f"{p}: expected a JSON list of strings")
    return data


def create_stub_app(responses: Sequence[str] = (), fail_statuses: Sequence[int] = ()) -> FastAPI:
    """
    OpenAI-compatible chat-completion stub for offline runs and tests.

    Rules:
    - The first len(fail_statuses) calls fail with those HTTP statuses.
    - Later calls return responses[served % len(responses)].
    - No scripted responses -> 503.
    """
    app = FastAPI(title="video-to-policy LLM stub")
    state = StubState(responses, fail_statuses)
    app.state.stub = state

    @app.get("/health")
    def health() -> Dict[str, bool]:
        return {"ok": True}

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse(status_code=400, content={"ok": False, "error": "invalid_json"})
        if not isinstance(payload, dict) or not isinstance(payload.get("messages"), list):
            return JSONResponse(status_code=400, content={"ok": False, "error": "messages_required"})

        call = state.calls
        state.calls += 1
        state.requests.append(payload)
        if call < len(state.fail_statuses):
            status = state.fail_statuses[call]
            logger.info("stub call %d: scripted failure %d", call, status)
            return JSONResponse(status_code=status, content={"error": {"message": f"scripted failure {status}"}})
        if not state.responses:
            return JSONResponse(status_code=503, content={"error": {"message": "no scripted responses"}})

        text = state.responses[state.served % len(state.responses)]
        state.served += 1
        request_id = f"stub-{call:06d}"
        body = {
            "id": request_id,
            "object": "chat.completion",
            "model": payload.get("model") or "stub",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        }
        return JSONResponse(status_code=200, content=body, headers={"x-request-id": request_id})

    return app


def _default_responses() -> List[str]:
    path = (os.getenv("V2P_STUB_RESPONSES") or "").strip()
    if not path:
        return []
    try:
        return load_responses(path)
    except (OSError, ValueError) as e:
        logger.warning("could not load stub responses from %s: %s", path, e)
        return []


app = create_stub_app(_default_responses())


def serve(responses: Optional[Sequence[str]] = None, host: str = "127.0.0.1", port: int = 8008, fail_statuses: Sequence[int] = ()) -> None:
    uvicorn.run(create_stub_app(responses or (), fail_statuses), host=host, port=port, log_level="info")
