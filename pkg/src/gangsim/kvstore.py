"""In-process coordination store with revisions, prefix watches and leases.

Models the etcd instance the platform leans on: every mutation gets a
monotonically increasing revision, watchers see mutations under their
prefix gap-free and in revision order, and keys attached to a lease
disappear once the lease outlives its TTL without renewal.

The store keeps the full mutation log for the lifetime of the process so
a watch may start from any past revision.  Fine at simulation scale.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass

MAX_VALUE_BYTES = 1024

DEFAULT_LEARNER_LEASE_TTL_S = 30.0


class StoreError(Exception):
    pass


class ValueTooLarge(StoreError):
    pass


class UnknownLease(StoreError):
    pass


@dataclass(frozen=True)
class WatchEvent:
    revision: int
    key: str
    value: bytes | None   # None for a delete
    kind: str             # "put" | "delete"


@dataclass
class KvEntry:
    key: str
    value: bytes
    revision: int          # revision of the latest write
    lease_id: int | None = None


@dataclass
class Lease:
    lease_id: int
    ttl: float
    granted_at: float

    def expired(self, now: float) -> bool:
        return now >= self.granted_at + self.ttl


class Watch:
    """Cursor over the store's mutation log, filtered by key prefix."""

    def __init__(self, store: "CoordinationStore", prefix: str, from_revision: int):
        self._store = store
        self.prefix = prefix
        self.from_revision = from_revision
        # skip log entries older than from_revision; log revisions are
        # strictly increasing so binary search lands on the first match
        self._cursor = bisect_left(store.log_revisions(), from_revision)

    def poll(self) -> list[WatchEvent]:
        """Drain new mutations under the prefix, in revision order."""
        log = self._store.mutation_log()
        out = []
        while self._cursor < len(log):
            ev = log[self._cursor]
            self._cursor += 1
            if ev.key.startswith(self.prefix):
                out.append(ev)
        return out


class CoordinationStore:
    def __init__(self):
        self._entries: dict[str, KvEntry] = {}
        self._log: list[WatchEvent] = []
        self._log_revs: list[int] = []
        self._revision = 0
        self._leases: dict[int, Lease] = {}
        self._next_lease_id = 1

    # -------------------------------------------------- introspection

    @property
    def revision(self) -> int:
        return self._revision

    def mutation_log(self) -> list[WatchEvent]:
        return self._log

    def log_revisions(self) -> list[int]:
        return self._log_revs

    def keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._entries if k.startswith(prefix))

    def dump(self) -> dict:
        """Debug snapshot of live entries."""
        return {
            k: {
                "value": self._entries[k].value.decode("utf-8", "replace"),
                "revision": self._entries[k].revision,
                "lease_id": self._entries[k].lease_id,
            }
            for k in self.keys()
        }

    # -------------------------------------------------- mutations

    def _append(self, key: str, value: bytes | None, kind: str) -> int:
        self._revision += 1
        ev = WatchEvent(revision=self._revision, key=key, value=value, kind=kind)
        self._log.append(ev)
        self._log_revs.append(self._revision)
        return self._revision

    def put(self, key: str, value, lease_id: int | None = None, now: float = 0.0) -> int:
        """Write a key, returning the new revision."""
        if isinstance(value, str):
            value = value.encode("utf-8")
        if len(value) > MAX_VALUE_BYTES:
            raise ValueTooLarge(f"{key}: {len(value)} bytes > {MAX_VALUE_BYTES}")
        if lease_id is not None:
            lease = self._leases.get(lease_id)
            if lease is None or lease.expired(now):
                raise UnknownLease(str(lease_id))
        rev = self._append(key, value, "put")
        self._entries[key] = KvEntry(key=key, value=value, revision=rev, lease_id=lease_id)
        return rev

    def get(self, key: str) -> bytes | None:
        entry = self._entries.get(key)
        return entry.value if entry else None

    def entry(self, key: str) -> KvEntry | None:
        return self._entries.get(key)

    def delete(self, key: str) -> int | None:
        """Delete a key if present, returning the delete's revision."""
        if key not in self._entries:
            return None
        del self._entries[key]
        return self._append(key, None, "delete")

    def delete_prefix(self, prefix: str) -> int:
        """Delete every key under a prefix (in sorted key order)."""
        doomed = self.keys(prefix)
        for k in doomed:
            self.delete(k)
        return len(doomed)

    # -------------------------------------------------- watches

    def watch(self, prefix: str, from_revision: int = 0) -> Watch:
        return Watch(self, prefix, from_revision)

    # -------------------------------------------------- leases

    def grant_lease(self, ttl: float, now: float) -> int:
        if ttl <= 0:
            raise ValueError("lease ttl must be positive")
        lease_id = self._next_lease_id
        self._next_lease_id += 1
        self._leases[lease_id] = Lease(lease_id=lease_id, ttl=ttl, granted_at=now)
        return lease_id

    def renew_lease(self, lease_id: int, now: float) -> None:
        """Keep-alive: restart the TTL window from now."""
        lease = self._leases.get(lease_id)
        if lease is None:
            raise UnknownLease(str(lease_id))
        lease.granted_at = now

    def lease(self, lease_id: int) -> Lease | None:
        return self._leases.get(lease_id)

    def next_lease_expiry(self) -> float | None:
        if not self._leases:
            return None
        return min(l.granted_at + l.ttl for l in self._leases.values())

    def revoke_lease(self, lease_id: int) -> list[str]:
        """Drop one lease unconditionally, deleting its keys (sorted)."""
        if lease_id not in self._leases:
            return []
        del self._leases[lease_id]
        doomed = sorted(k for k, e in self._entries.items() if e.lease_id == lease_id)
        for k in doomed:
            self.delete(k)
        return doomed

    def expire_leases(self, now: float) -> list[str]:
        """Drop expired leases and delete their keys.  Returns deleted keys."""
        dead = sorted(lid for lid, l in self._leases.items() if l.expired(now))
        deleted: list[str] = []
        for lid in dead:
            del self._leases[lid]
            doomed = sorted(k for k, e in self._entries.items() if e.lease_id == lid)
            for k in doomed:
                self.delete(k)
                deleted.append(k)
        return deleted
