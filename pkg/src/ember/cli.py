"""Command-line control surface.

`ember peer start` runs the daemon in the foreground; every other command
talks to the running daemon over the loopback control API using the bearer
token from the identity directory. Exit codes: 0 success, 1 command failed
(a machine-parsable `error: <category>: <message>` line goes to stderr),
2 usage error, 7 daemon unreachable.
"""

from __future__ import annotations

import argparse
import logging
import re
import signal
import sys
from pathlib import Path
from typing import Optional

import httpx

from .config import Config
from .errors import EmberError, PreconditionError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNREACHABLE = 7

_TTL_RE = re.compile(r"^(\d+)(ms|s|m|h)?$")
_TTL_UNITS = {"ms": 1, "s": 1000, "m": 60_000, "h": 3_600_000, None: 1}


def parse_ttl(text: str) -> int:
    """Durations like 1500ms / 60s / 5m / 2h; a bare integer is ms."""
    match = _TTL_RE.match(text.strip())
    if not match:
        raise PreconditionError(f"bad ttl: {text!r} (use e.g. 60s, 5m, 1500ms)")
    return int(match.group(1)) * _TTL_UNITS[match.group(2)]


class ControlClient:
    def __init__(self, config: Config):
        self._url = f"http://{config.control_host}:{config.control_port}/rpc"
        token_file = config.identity_dir / "control.token"
        self._token = token_file.read_text().strip() if token_file.exists() else ""
        self._next_id = 1

    def call(self, method: str, params: Optional[dict] = None) -> dict:
        request_id = self._next_id
        self._next_id += 1
        try:
            response = httpx.post(
                self._url,
                json={"id": request_id, "method": method, "params": params or {}},
                headers={"Authorization": f"Bearer {self._token}"},
                timeout=60,
            )
        except httpx.HTTPError as exc:
            print(f"error: unreachable: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_UNREACHABLE) from None
        obj = response.json()
        if "error" in obj:
            err = obj["error"]
            print(f"error: {err['category']}: {err['message']}", file=sys.stderr)
            raise SystemExit(EXIT_UNREACHABLE if err["category"] == "unauthorized" else EXIT_ERROR)
        return obj["result"]


def _config_from_args(args) -> Config:
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "listen_port",
            "control_port",
            "control_host",
            "local_address",
            "display_name",
            "identity_dir",
            "default_ttl_ms",
            "sweep_interval_ms",
            "webui_dir",
        )
    }
    return Config.from_env(**overrides)


def cmd_peer_start(args) -> int:
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    from .daemon import Daemon

    config = _config_from_args(args)
    daemon = Daemon(config)
    daemon.start()
    url = f"http://{config.control_host}:{daemon.control_port}/#token={daemon.token}"
    print(f"listener: port {daemon.listener.port}")
    print(f"control:  {config.control_host}:{daemon.control_port}")
    print(f"webui:    {url}")
    sys.stdout.flush()

    def handle_signal(signum, frame):
        daemon.request_stop()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
    daemon.wait()
    return EXIT_OK


def cmd_peer_stop(args) -> int:
    ControlClient(_config_from_args(args)).call("shutdown")
    print("stopping")
    return EXIT_OK


def cmd_peer_status(args) -> int:
    status = ControlClient(_config_from_args(args)).call("getNetworkStatus")
    print(f"state: {status['listener']}")
    print(f"listen port: {status['listenPort']}")
    print(f"control port: {status['controlPort']}")
    print(f"display name: {status['displayName']}")
    print(f"conversations: {status['conversations']}")
    return EXIT_OK


def cmd_contact_add(args) -> int:
    result = ControlClient(_config_from_args(args)).call(
        "addContact",
        {"name": args.name, "address": args.addr, "port": args.port, "keyBase64": args.key},
    )
    print(f"conversation: {result['conversationId']}")
    print(f"fingerprint:  {result['fingerprint']}")
    return EXIT_OK


def cmd_contact_list(args) -> int:
    result = ControlClient(_config_from_args(args)).call("listConversations")
    for conv in result["conversations"]:
        endpoint = conv["endpoint"]
        print(
            f"{conv['conversationId']}  {conv['contactName']}  "
            f"[{endpoint['address']}]:{endpoint['port']}  trust={conv['trust']}  "
            f"v{conv['activeKeyVersion']}"
        )
    if not result["conversations"]:
        print("(no contacts)")
    return EXIT_OK


def cmd_contact_fingerprint(args) -> int:
    result = ControlClient(_config_from_args(args)).call(
        "getFingerprint", {"conversationId": args.conversation}
    )
    print(f"{result['fingerprint']}  trust={result['trust']}")
    return EXIT_OK


def cmd_msg_send(args) -> int:
    params = {"conversationId": args.conversation, "text": args.text}
    if args.ttl is not None:
        params["ttlMs"] = parse_ttl(args.ttl)
    result = ControlClient(_config_from_args(args)).call("sendMessage", params)
    print(result["id"])
    if result["deliveryStatus"] != "delivered":
        print(f"warning: delivery status {result['deliveryStatus']}", file=sys.stderr)
    return EXIT_OK


def cmd_msg_list(args) -> int:
    result = ControlClient(_config_from_args(args)).call(
        "listMessages", {"conversationId": args.conversation, "limit": args.limit}
    )
    for msg in result["messages"]:
        body = msg["plaintext"] if msg["plaintext"] is not None else f"<{msg.get('error')}>"
        print(f"[{msg['timestamp']}] {msg['direction']:8s} {msg['senderName']}: {body}")
    if not result["messages"]:
        print("(no messages)")
    return EXIT_OK


def cmd_rotate(args) -> int:
    import time

    client = ControlClient(_config_from_args(args))
    client.call("startRotation", {"conversationId": args.conversation})
    # the confirm/activate legs arrive over the listener; poll briefly
    state = None
    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        state = client.call("getRotationState", {"conversationId": args.conversation})
        if state["phase"] in ("IDLE", "ABORTED"):
            break
        time.sleep(0.1)
    print(f"rotation: phase={state['phase']} activeKeyVersion={state['activeKeyVersion']}")
    if state["phase"] == "ABORTED":
        print("error: rotation-aborted: challenge verification failed", file=sys.stderr)
        return EXIT_ERROR
    if state["phase"] != "IDLE":
        print("error: rotation-timeout: no confirmation from peer", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_sweep_now(args) -> int:
    result = ControlClient(_config_from_args(args)).call("sweepNow")
    print(f"removed: {result['removed']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ember", description="serverless two-party secure messenger")
    parser.add_argument("--identity-dir", type=Path, default=None, help="identity/state directory")
    parser.add_argument("--control-port", type=int, default=None)
    parser.add_argument("--control-host", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    peer = sub.add_parser("peer", help="daemon lifecycle")
    peer_sub = peer.add_subparsers(dest="subcommand", required=True)
    start = peer_sub.add_parser("start", help="run the daemon in the foreground")
    start.add_argument("--listen-port", type=int, default=None)
    start.add_argument("--local-address", default=None)
    start.add_argument("--display-name", default=None)
    start.add_argument("--default-ttl-ms", type=int, default=None)
    start.add_argument("--sweep-interval-ms", type=int, default=None)
    start.add_argument("--webui-dir", type=Path, default=None)
    start.add_argument("--verbose", action="store_true")
    start.set_defaults(func=cmd_peer_start)
    peer_sub.add_parser("stop", help="stop a running daemon").set_defaults(func=cmd_peer_stop)
    peer_sub.add_parser("status", help="daemon status").set_defaults(func=cmd_peer_status)

    contact = sub.add_parser("contact", help="manage contacts")
    contact_sub = contact.add_subparsers(dest="subcommand", required=True)
    add = contact_sub.add_parser("add", help="add a contact with an imported key")
    add.add_argument("--name", required=True)
    add.add_argument("--addr", required=True, help="peer IP address")
    add.add_argument("--port", required=True, type=int)
    add.add_argument("--key", required=True, help="base64 32-byte conversation key")
    add.set_defaults(func=cmd_contact_add)
    contact_sub.add_parser("list", help="list contacts").set_defaults(func=cmd_contact_list)
    fp = contact_sub.add_parser("fingerprint", help="show a conversation's fingerprint")
    fp.add_argument("conversation")
    fp.set_defaults(func=cmd_contact_fingerprint)

    msg = sub.add_parser("msg", help="send and read messages")
    msg_sub = msg.add_subparsers(dest="subcommand", required=True)
    send = msg_sub.add_parser("send", help="send a message")
    send.add_argument("conversation")
    send.add_argument("text")
    send.add_argument("--ttl", default=None, help="e.g. 60s, 5m, 1500ms")
    send.set_defaults(func=cmd_msg_send)
    lst = msg_sub.add_parser("list", help="list messages (decrypted on demand)")
    lst.add_argument("conversation")
    lst.add_argument("--limit", type=int, default=50)
    lst.set_defaults(func=cmd_msg_list)

    rotate = sub.add_parser("rotate", help="rotate a conversation key")
    rotate.add_argument("conversation")
    rotate.set_defaults(func=cmd_rotate)

    sweep = sub.add_parser("sweep", help="TTL sweep")
    sweep_sub = sweep.add_subparsers(dest="subcommand", required=True)
    sweep_sub.add_parser("now", help="sweep expired messages immediately").set_defaults(
        func=cmd_sweep_now
    )

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except EmberError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
