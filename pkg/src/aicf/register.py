"""The Register: node/app descriptors, registration workflow and claims.

:class:`Registry` is the state owner. All mutations run under one lock and
either commit completely or leave the state untouched. :class:`RegisterService`
exposes it over the node broker through the reserved ``register/*`` topics.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass

from .errors import RegistryError
from .message import AppDescriptor, Envelope, MsgType, NodeDescriptor

log = logging.getLogger(__name__)

QUERIES = ("all_nodes", "node", "apps", "claims")


class ConflictPolicy(str, enum.Enum):
    reject = "reject"
    priority_preempt = "priority_preempt"

    @classmethod
    def parse(cls, text: str) -> "ConflictPolicy":
        return cls(text.replace("-", "_"))


@dataclass(frozen=True)
class Revocation:
    app_id: str
    node_id: str
    param: str


class Registry:
    def __init__(self, policy: ConflictPolicy = ConflictPolicy.reject,
                 snapshot_path: str | None = None, journal: bool = False):
        self.policy = ConflictPolicy(policy)
        self.snapshot_path = snapshot_path
        self.nodes: dict[str, NodeDescriptor] = {}
        self.apps: dict[str, AppDescriptor] = {}
        self.claims: dict[tuple[str, str], str] = {}
        self.owners: dict[str, str] = {}
        self._lock = threading.RLock()
        # (operation, argument, error code or None) in commit order
        self.journal: list[tuple] | None = [] if journal else None

    def _log(self, op: str, arg, error: str | None) -> None:
        if self.journal is not None:
            self.journal.append((op, arg, error))

    # -- nodes ---------------------------------------------------------------

    def register_node(self, desc: NodeDescriptor) -> list[Revocation]:
        with self._lock:
            try:
                self._register_node(desc)
            except RegistryError as exc:
                self._log("register_node", desc, exc.code)
                raise
            self._log("register_node", desc, None)
            return []

    def _register_node(self, desc: NodeDescriptor) -> None:
        problems = desc.problems()
        if problems:
            raise RegistryError("MALFORMED", "; ".join(problems))
        if desc.node_id in self.nodes:
            keep = {p.name for p in desc.controls}
            orphaned = sorted(p for (n, p) in self.claims if n == desc.node_id and p not in keep)
            if orphaned:
                holders = [self.claims[(desc.node_id, p)] for p in orphaned]
                raise RegistryError(
                    "DUPLICATE_ID",
                    f"re-registering {desc.node_id} would orphan claims on {orphaned} held by {holders}")
        self.nodes[desc.node_id] = desc

    # -- apps ----------------------------------------------------------------

    def unsatisfied(self, desc: AppDescriptor) -> tuple[list[tuple[str, str]], list[tuple[str, str, str]], list[Revocation]]:
        """Return ``(missing, conflicts, preemptions)`` for a prospective app."""
        missing: list[tuple[str, str]] = []
        conflicts: list[tuple[str, str, str]] = []
        preempt: list[Revocation] = []
        for node_id, metric in desc.required_measurements:
            node = self.nodes.get(node_id)
            if node is None or node.metric(metric) is None:
                missing.append((node_id, metric))
        for node_id, param in desc.controlled_params:
            node = self.nodes.get(node_id)
            if node is None or node.control(param) is None:
                missing.append((node_id, param))
                continue
            holder = self.claims.get((node_id, param))
            if holder is None or holder == desc.app_id:
                continue
            if (self.policy is ConflictPolicy.priority_preempt
                    and desc.priority > self.apps[holder].priority):
                preempt.append(Revocation(holder, node_id, param))
            else:
                conflicts.append((node_id, param, holder))
        return list(dict.fromkeys(missing)), conflicts, preempt

    def _missing_code(self, desc: AppDescriptor, missing) -> str:
        if any(n not in self.nodes for n, _ in missing):
            return "MISSING_NODE"
        required = set(desc.required_measurements)
        if any(m in required and self.nodes[m[0]].metric(m[1]) is None for m in missing):
            return "MISSING_METRIC"
        return "MISSING_PARAM"

    def register_app(self, desc: AppDescriptor, owner: str | None = None) -> list[Revocation]:
        """Check-then-claim atomically. Returns the claims preempted from other apps."""
        with self._lock:
            try:
                revoked = self._register_app(desc, owner)
            except RegistryError as exc:
                self._log("register_app", desc, exc.code)
                raise
            self._log("register_app", desc, None)
            return revoked

    def _register_app(self, desc: AppDescriptor, owner: str | None) -> list[Revocation]:
        problems = desc.problems()
        if problems:
            raise RegistryError("MALFORMED", "; ".join(problems))
        if desc.app_id in self.apps:
            raise RegistryError("DUPLICATE_ID", f"app {desc.app_id} already registered")
        missing, conflicts, preempt = self.unsatisfied(desc)
        if missing:
            code = self._missing_code(desc, missing)
            raise RegistryError(code, f"{len(missing)} unavailable requirement(s) for {desc.app_id}",
                                missing, conflicts)
        if conflicts:
            raise RegistryError("CONFLICT", f"{desc.app_id} conflicts on "
                                f"{[(n, p) for n, p, _ in conflicts]}", (), conflicts)
        self.apps[desc.app_id] = desc
        if owner is not None:
            self.owners[desc.app_id] = owner
        for key in desc.controlled_params:
            self.claims[key] = desc.app_id
        return preempt

    # -- removal -------------------------------------------------------------

    def deregister(self, kind: str, ident: str) -> list[Revocation]:
        with self._lock:
            try:
                out = self._deregister(kind, ident)
            except RegistryError as exc:
                self._log("deregister", (kind, ident), exc.code)
                raise
            self._log("deregister", (kind, ident), None)
            return out

    def _deregister(self, kind: str, ident: str) -> list[Revocation]:
        if kind == "app":
            if ident not in self.apps:
                raise RegistryError("UNKNOWN_ID", f"no app {ident!r}")
            del self.apps[ident]
            self.owners.pop(ident, None)
            self.claims = {k: a for k, a in self.claims.items() if a != ident}
            return []
        if kind == "node":
            if ident not in self.nodes:
                raise RegistryError("UNKNOWN_ID", f"no node {ident!r}")
            del self.nodes[ident]
            revoked = [Revocation(a, n, p) for (n, p), a in self.claims.items() if n == ident]
            self.claims = {k: a for k, a in self.claims.items() if k[0] != ident}
            return revoked
        raise RegistryError("MALFORMED", f"unknown kind {kind!r}")

    # -- reads ---------------------------------------------------------------

    def lookup(self, query: str, ident: str | None = None):
        """Return a JSON-ready, independent copy of the requested slice."""
        with self._lock:
            if query == "all_nodes":
                return [d.to_dict() for d in self.nodes.values()]
            if query == "node":
                if ident not in self.nodes:
                    raise RegistryError("UNKNOWN_ID", f"no node {ident!r}")
                return self.nodes[ident].to_dict()
            if query == "apps":
                return [d.to_dict() for d in self.apps.values()]
            if query == "claims":
                return [[n, p, a] for (n, p), a in sorted(self.claims.items())]
        raise RegistryError("MALFORMED", f"unknown query {query!r}")

    def param_spec(self, node_id: str, param: str):
        node = self.nodes.get(node_id)
        return node.control(param) if node else None

    # -- persistence ---------------------------------------------------------

    def to_document(self) -> dict:
        with self._lock:
            return {
                "version": 1,
                "policy": self.policy.value,
                "nodes": [d.to_dict() for d in self.nodes.values()],
                "apps": [d.to_dict() for d in self.apps.values()],
                "claims": [[n, p, a] for (n, p), a in sorted(self.claims.items())],
                "owners": dict(sorted(self.owners.items())),
            }

    def snapshot(self, path: str | None = None) -> str:
        path = path or self.snapshot_path
        if not path:
            raise RegistryError("IO_FAILED", "no snapshot path configured")
        text = json.dumps(self.to_document(), sort_keys=True, indent=1)
        directory = os.path.dirname(os.path.abspath(path))
        try:
            fd, tmp = tempfile.mkstemp(prefix=".registry-", dir=directory)
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
            os.replace(tmp, path)
        except OSError as exc:
            raise RegistryError("IO_FAILED", f"{path}: {exc}") from None
        return path

    @classmethod
    def restore(cls, path: str, policy: ConflictPolicy | None = None) -> "Registry":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise RegistryError("IO_FAILED", f"{path}: {exc}") from None
        try:
            doc = json.loads(text)
            reg = cls(ConflictPolicy(policy or doc["policy"]), snapshot_path=path)
            for d in doc["nodes"]:
                reg.nodes[d["node_id"]] = NodeDescriptor.from_dict(d)
            for d in doc["apps"]:
                reg.apps[d["app_id"]] = AppDescriptor.from_dict(d)
            for n, p, a in doc["claims"]:
                reg.claims[(n, p)] = a
            reg.owners = dict(doc.get("owners", {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise RegistryError("MALFORMED", f"{path}: {exc or 'empty document'}") from None
        bad = reg.invariant_violations()
        if bad:
            raise RegistryError("MALFORMED", f"{path}: {'; '.join(bad)}")
        return reg

    def invariant_violations(self) -> list[str]:
        out = []
        for (n, p), a in self.claims.items():
            if n not in self.nodes or self.nodes[n].control(p) is None:
                out.append(f"claim on unknown ({n}, {p})")
            if a not in self.apps:
                out.append(f"claim held by unknown app {a}")
        return out

    def state_copy(self) -> tuple:
        with self._lock:
            return (copy.deepcopy(self.nodes), copy.deepcopy(self.apps), dict(self.claims))


class RegisterService:
    """Runs a :class:`Registry` as a client of the node broker."""

    TOPICS = ("register/node", "register/app", "register/query")

    def __init__(self, registry: Registry, link, autosnapshot: bool = True):
        self.registry = registry
        self.link = link
        self.autosnapshot = autosnapshot and registry.snapshot_path is not None
        self.handled = 0
        link.on_envelope = self._on_envelope
        link.on_connect = self._on_connect

    def start(self) -> None:
        self.link.start()

    def _on_connect(self) -> None:
        for t in self.TOPICS:
            self.link.subscribe(t)

    def _ack(self, env: Envelope, **fields) -> None:
        self.link.send(MsgType.REGISTER_ACK, {"reply_to": env.sender, "ref_seq": env.seq, **fields})

    def _fail(self, env: Envelope, exc: RegistryError) -> None:
        self.link.send(MsgType.EXCEPTION,
                       {"reply_to": env.sender, "ref_seq": env.seq, **exc.to_payload()})

    def _notify_revoked(self, revoked: list[Revocation], reason: str) -> None:
        by_app: dict[str, list] = {}
        for r in revoked:
            by_app.setdefault(r.app_id, []).append([r.node_id, r.param])
        for app_id, pairs in by_app.items():
            owner = self.registry.owners.get(app_id)
            if owner is None:
                continue
            self.link.send(MsgType.EXCEPTION, {
                "reply_to": owner, "code": "REVOKED", "app_id": app_id,
                "revoked": pairs, "detail": reason})

    def _on_envelope(self, env: Envelope) -> None:
        t = env.msg_type
        p = env.payload
        try:
            if t is MsgType.REGISTER_NODE:
                self.handled += 1
                self.registry.register_node(_parse(NodeDescriptor, p))
                self._ack(env, op="REGISTER_NODE", id=p["node_id"])
                self._changed()
            elif t is MsgType.REGISTER_APP:
                self.handled += 1
                desc = _parse(AppDescriptor, p)
                revoked = self.registry.register_app(desc, owner=env.sender)
                specs = [[n, self.registry.param_spec(n, p).to_dict()]
                         for n, p in desc.controlled_params]
                self._ack(env, op="REGISTER_APP", id=desc.app_id,
                          claims=[list(k) for k in desc.controlled_params], param_specs=specs)
                self._notify_revoked(revoked, f"preempted by {desc.app_id}")
                self._changed()
            elif t is MsgType.DEREGISTER:
                self.handled += 1
                kind, ident = p.get("kind"), p.get("id")
                owner = self.registry.owners.get(ident) if kind == "app" else None
                revoked = self.registry.deregister(kind, ident)
                self._ack(env, op="DEREGISTER", kind=kind, id=ident)
                if owner is not None and owner != env.sender:
                    log.info("app %s deregistered by %s (owner %s)", ident, env.sender, owner)
                self._notify_revoked(revoked, f"node {ident} deregistered")
                self._changed()
            elif t is MsgType.PUBLISH and env.topic == "register/query":
                result = self.registry.lookup(p.get("query"), p.get("id"))
                self._ack(env, op="LOOKUP", query=p.get("query"), result=result)
        except RegistryError as exc:
            self._fail(env, exc)

    def _changed(self) -> None:
        if self.autosnapshot:
            try:
                self.registry.snapshot()
            except RegistryError as exc:
                log.error("snapshot failed: %s", exc)


def _parse(cls, payload: dict):
    try:
        return cls.from_dict(payload)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise RegistryError("MALFORMED", f"bad {cls.__name__}: {exc}") from None
