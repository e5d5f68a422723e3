"""API-key authentication with salted, cost-parameterized hashing.

Keys are stored only as scrypt hashes (``scrypt$<cost>$<salt>$<digest>``);
cost is the log2 of the scrypt work factor, so verification latency grows
with it. Requests authenticate via X-Username / X-Api-Key headers.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import threading
from dataclasses import dataclass
from typing import Mapping, Optional

MIN_COST = 2
MAX_COST = 20
DEFAULT_COST = 12

USERNAME_HEADER = "x-username"
API_KEY_HEADER = "x-api-key"


class AuthFailure(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Credential:
    username: str
    key_hash: str
    tenant: str
    hash_cost: int


def hash_credential(plaintext_key: str, cost: int = DEFAULT_COST) -> str:
    if not MIN_COST <= cost <= MAX_COST:
        raise ValueError(f"cost must be within [{MIN_COST}, {MAX_COST}], got {cost}")
    salt = os.urandom(16)
    digest = hashlib.scrypt(plaintext_key.encode("utf-8"), salt=salt, n=2**cost, r=8, p=1, dklen=32)
    return f"scrypt${cost}${salt.hex()}${digest.hex()}"


def verify_credential(plaintext_key: str, key_hash: str) -> bool:
    """Constant-time comparison; a malformed stored hash verifies false."""
    try:
        scheme, cost_s, salt_hex, digest_hex = key_hash.split("$")
        if scheme != "scrypt":
            return False
        cost = int(cost_s)
        if not MIN_COST <= cost <= MAX_COST:
            return False
        salt = bytes.fromhex(salt_hex)
        expected = bytes.fromhex(digest_hex)
    except (ValueError, AttributeError):
        return False
    actual = hashlib.scrypt(plaintext_key.encode("utf-8"), salt=salt, n=2**cost, r=8, p=1, dklen=32)
    return hmac.compare_digest(actual, expected)


def hash_cost_of(key_hash: str) -> int:
    try:
        return int(key_hash.split("$")[1])
    except (IndexError, ValueError):
        return -1


class CredentialStore:
    """Read-mostly username -> credential map; safe for concurrent reads."""

    def __init__(self):
        self._by_username: dict = {}
        self._lock = threading.Lock()
        # verified against unknown usernames so lookups don't short-circuit
        self._decoy_hash = hash_credential("decoy", MIN_COST)

    def add(self, credential: Credential) -> None:
        with self._lock:
            if credential.username in self._by_username:
                raise ValueError(f"username {credential.username!r} already registered")
            self._by_username[credential.username] = credential

    def lookup(self, username: str) -> Optional[Credential]:
        return self._by_username.get(username)

    def tenants(self) -> set:
        return {c.tenant for c in self._by_username.values()}

    def authenticate(self, headers: Mapping[str, str]) -> str:
        """Return the tenant bound to the presented username, or raise AuthFailure."""
        lowered = {k.lower(): v for k, v in headers.items()}
        username = lowered.get(USERNAME_HEADER)
        api_key = lowered.get(API_KEY_HEADER)
        if not username or not api_key:
            raise AuthFailure(
                "missing_credentials",
                f"both {USERNAME_HEADER} and {API_KEY_HEADER} headers are required",
            )
        credential = self._by_username.get(username)
        if credential is None:
            verify_credential(api_key, self._decoy_hash)
            raise AuthFailure("invalid_credentials", "unknown username or wrong API key")
        if not verify_credential(api_key, credential.key_hash):
            raise AuthFailure("invalid_credentials", "unknown username or wrong API key")
        return credential.tenant
