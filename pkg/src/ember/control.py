"""Loopback control API consumed by the CLI and the browser client.

Two surfaces share one JSON schema:

  POST /rpc            {id, method, params} -> {id, result} | {id, error}
                       with an Authorization: Bearer token (CLI path)
  WS   /ws             the same request/response messages over a
                       persistent channel, plus server pushes of the form
                       {event, data}; the first client message must be a
                       `hello` carrying the token, answered with the
                       capability list (browser path)

Responses and events never carry raw key material; key identity crosses
this boundary as fingerprints only. Decrypted message bodies do cross it
(the UI has to render them), which is why the server binds to loopback and
requires the bearer token from the identity directory.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import logging
import queue
import secrets
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse
from starlette.concurrency import run_in_threadpool

from . import __version__
from .crypto import KEY_LEN, SymmetricKey
from .envelope import Endpoint
from .errors import EmberError, UndecryptableHistoryError
from .rotation import RotationPhase

logger = logging.getLogger(__name__)

CAPABILITIES = ["core.v1", "events.v1"]


class ApiError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category
        self.message = message


def _require(params: dict, name: str, kind=str):
    if name not in params:
        raise ApiError("validation", f"missing parameter: {name}")
    value = params[name]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ApiError("validation", f"parameter {name} must be {kind.__name__}")
    return value


def _conversation_view(daemon, conversation_id: str) -> dict:
    peer = daemon.peer
    contact = peer.store.get_contact(conversation_id)
    meta = peer.store.get_conversation_meta(conversation_id)
    trust = peer.keystore.trust(conversation_id)
    return {
        "conversationId": conversation_id,
        "contactName": contact.display_name,
        "endpoint": {"address": contact.endpoint.address, "port": contact.endpoint.port},
        "fingerprint": peer.fingerprint(conversation_id),
        "trust": trust.status.value,
        "activeKeyVersion": peer.keystore.active_version(conversation_id),
        "rotationPhase": peer.rotation_phase(conversation_id).value,
        "lastActivity": meta.last_activity,
        "defaultTtlMs": meta.default_ttl,
    }


def dispatch(daemon, method: str, params: Optional[dict]) -> Any:
    """Execute one control method against the live daemon. Every mutation
    maps onto a pipeline operation; there is no direct path into the store
    or the crypto layer."""
    peer = daemon.peer
    params = params or {}
    if not isinstance(params, dict):
        raise ApiError("validation", "params must be an object")

    if method == "hello":
        return {"capabilities": CAPABILITIES, "daemon": "ember", "version": __version__}

    if method == "listConversations":
        return {
            "conversations": [
                _conversation_view(daemon, conv) for conv in peer.store.list_conversation_ids()
            ]
        }

    if method == "listMessages":
        conversation_id = _require(params, "conversationId")
        limit = params.get("limit", 100)
        peer.store.get_conversation_meta(conversation_id)  # unknown id -> not-found
        records = peer.store.query_messages(conversation_id, limit)
        messages = []
        for rec in records:
            row = {
                "id": rec.id,
                "direction": rec.direction.value,
                "senderName": rec.sender_name,
                "timestamp": rec.timestamp,
                "ttlMs": rec.ttl,
                "expiresAt": rec.expires_at,
                "keyVersion": rec.key_version,
                "deliveryStatus": rec.delivery_status,
            }
            try:
                row["plaintext"] = peer.decrypt_for_display(rec)
            except UndecryptableHistoryError:
                row["plaintext"] = None
                row["error"] = "undecryptable-history"
            messages.append(row)
        return {"messages": messages}

    if method == "sendMessage":
        conversation_id = _require(params, "conversationId")
        text = _require(params, "text")
        ttl = params.get("ttlMs")
        record = peer.send_message(conversation_id, text, ttl)
        return {
            "id": record.id,
            "timestamp": record.timestamp,
            "expiresAt": record.expires_at,
            "deliveryStatus": record.delivery_status,
        }

    if method == "addContact":
        name = _require(params, "name")
        address = _require(params, "address")
        port = _require(params, "port", int)
        key_b64 = _require(params, "keyBase64")
        try:
            key_bytes = base64.b64decode(key_b64, validate=True)
        except (binascii.Error, ValueError):
            raise ApiError("validation", "keyBase64 is not valid Base64") from None
        if len(key_bytes) != KEY_LEN:
            raise ApiError("validation", f"key must be {KEY_LEN} bytes")
        contact = peer.add_contact(name, Endpoint(address, port), SymmetricKey(key_bytes))
        return {
            "conversationId": contact.conversation_id,
            "fingerprint": peer.fingerprint(contact.conversation_id),
        }

    if method == "getFingerprint":
        conversation_id = _require(params, "conversationId")
        trust = peer.keystore.trust(conversation_id)
        return {
            "conversationId": conversation_id,
            "fingerprint": peer.fingerprint(conversation_id),
            "trust": trust.status.value,
        }

    if method == "setVerified":
        conversation_id = _require(params, "conversationId")
        trust = peer.mark_verified(conversation_id)
        daemon.control_events.publish(
            {"event": "trustState", "data": {"conversationId": conversation_id,
                                             "status": trust.status.value}}
        )
        return {"conversationId": conversation_id, "trust": trust.status.value}

    if method == "startRotation":
        # the exchange completes asynchronously (CONFIRM arrives over the
        # listener); this reports the in-flight state, events report the rest
        conversation_id = _require(params, "conversationId")
        result = peer.start_rotation(conversation_id)
        if not result.delivered:
            raise ApiError("delivery-failure",
                           f"rotation request not delivered: {result.error}")
        return {
            "conversationId": conversation_id,
            "delivered": result.delivered,
            "attempts": result.attempts,
            "phase": peer.rotation_phase(conversation_id).value,
            "activeKeyVersion": peer.keystore.active_version(conversation_id),
        }

    if method == "getRotationState":
        conversation_id = _require(params, "conversationId")
        return {
            "conversationId": conversation_id,
            "phase": peer.rotation_phase(conversation_id).value,
            "activeKeyVersion": peer.keystore.active_version(conversation_id),
        }

    if method == "getNetworkStatus":
        listener = daemon.listener
        return {
            "listener": listener.state.value.value if listener else "DISCONNECTED",
            "listenerDetail": listener.state.detail if listener else None,
            "listenPort": listener.port if listener else None,
            "controlPort": daemon.control_port,
            "displayName": peer.display_name,
            "localAddress": peer.local_endpoint.address,
            "conversations": len(peer.store.list_conversation_ids()),
        }

    if method == "sweepNow":
        return {"removed": peer.sweep_expired()}

    if method == "shutdown":
        daemon.request_stop()
        return {"stopping": True}

    raise ApiError("unknown-method", f"no such method: {method}")


def _error_obj(request_id, category: str, message: str) -> dict:
    return {"id": request_id, "error": {"category": category, "message": message}}


def _handle_request(daemon, obj: dict) -> dict:
    request_id = obj.get("id")
    method = obj.get("method")
    if not isinstance(method, str):
        return _error_obj(request_id, "validation", "method must be a string")
    try:
        result = dispatch(daemon, method, obj.get("params"))
        return {"id": request_id, "result": result}
    except ApiError as exc:
        return _error_obj(request_id, exc.category, exc.message)
    except EmberError as exc:
        return _error_obj(request_id, exc.category, str(exc))
    except Exception:
        logger.exception("control method %s failed", method)
        return _error_obj(request_id, "internal", "internal error")


def _find_webui_dir(daemon) -> Optional[Path]:
    configured = daemon.config.webui_dir
    if configured is not None:
        return configured if configured.is_dir() else None
    bundled = Path(__file__).parent / "web"
    if (bundled / "index.html").is_file():
        return bundled
    repo_dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if (repo_dist / "index.html").is_file():
        return repo_dist
    return None


def create_app(daemon) -> FastAPI:
    app = FastAPI(title="ember-control", version=__version__, docs_url=None, redoc_url=None)
    webui_dir = _find_webui_dir(daemon)

    def token_ok(provided: Optional[str]) -> bool:
        return bool(provided) and secrets.compare_digest(provided, daemon.token)

    @app.post("/rpc")
    def rpc(obj: dict, request: Request):
        auth = request.headers.get("authorization", "")
        provided = auth[7:] if auth.lower().startswith("bearer ") else None
        if not token_ok(provided):
            return JSONResponse(
                _error_obj(obj.get("id"), "unauthorized", "missing or bad token"),
                status_code=401,
            )
        return _handle_request(daemon, obj)

    @app.websocket("/ws")
    async def ws(websocket: WebSocket):
        await websocket.accept()
        try:
            hello = await asyncio.wait_for(websocket.receive_json(), timeout=10)
        except Exception:
            await websocket.close(code=1008)
            return
        params = hello.get("params") or {}
        if hello.get("method") != "hello" or not token_ok(params.get("token")):
            await websocket.close(code=1008)  # connection refused: bad token
            return
        await websocket.send_json(
            {"id": hello.get("id"), "result": dispatch(daemon, "hello", {})}
        )

        subscription = daemon.control_events.subscribe()

        async def push_events():
            while True:
                try:
                    event = await asyncio.to_thread(subscription.get, 0.2)
                except queue.Empty:
                    continue
                await websocket.send_json(event)

        pusher = asyncio.create_task(push_events())
        try:
            while True:
                obj = await websocket.receive_json()
                response = await run_in_threadpool(_handle_request, daemon, obj)
                await websocket.send_json(response)
        except WebSocketDisconnect:
            pass
        finally:
            pusher.cancel()
            subscription.close()

    if webui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        @app.get("/")
        def index():
            return FileResponse(webui_dir / "index.html")

        app.mount("/app", StaticFiles(directory=webui_dir), name="webui")
    else:

        @app.get("/")
        def index_placeholder():
            return JSONResponse({"daemon": "ember", "webui": "not built",
                                 "hint": "run npm install && npm run build in frontend/"})

    return app
