import base64
import hashlib
import hmac
import os
import threading
from typing import Optional

from cryptography.exceptions import InvalidKey
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt
from fastapi import Depends, HTTPException, Request, status
from fastapi.security import HTTPBasic, HTTPBasicCredentials

from wattline.core.config import BasicAuthConfig

SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1
KEY_LENGTH = 32


def _kdf(salt: bytes) -> Scrypt:
    return Scrypt(salt=salt, length=KEY_LENGTH, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P)


def hash_password(password: str, salt: Optional[bytes] = None) -> str:
    """
    Hash a password for the config file

    Returns:
        `scrypt$<salt b64>$<key b64>`
    """
    salt = salt or os.urandom(16)
    key = _kdf(salt).derive(password.encode())
    return "scrypt${}${}".format(
        base64.b64encode(salt).decode(), base64.b64encode(key).decode()
    )


def verify_password(password: str, encoded: str) -> bool:
    try:
        scheme, salt_b64, key_b64 = encoded.split("$")
        if scheme != "scrypt":
            return False
        salt = base64.b64decode(salt_b64)
        key = base64.b64decode(key_b64)
    except ValueError:
        return False
    try:
        _kdf(salt).verify(password.encode(), key)
        return True
    except InvalidKey:
        return False


class BasicAuthGuard:
    """
    Checks basic-auth credentials against the configured hash.
    Successful checks are remembered by digest so scrapes do not pay
    the scrypt cost every time.
    """

    def __init__(self, config: Optional[BasicAuthConfig]):
        self.config = config
        self._verified: set[bytes] = set()
        self._lock = threading.Lock()

    @property
    def enabled(self) -> bool:
        return self.config is not None

    def check(self, credentials: Optional[HTTPBasicCredentials]) -> bool:
        if self.config is None:
            return True
        if credentials is None:
            return False
        if not hmac.compare_digest(credentials.username.encode(), self.config.username.encode()):
            return False
        digest = hashlib.sha256(
            f"{credentials.username}\0{credentials.password}".encode()
        ).digest()
        with self._lock:
            if digest in self._verified:
                return True
        if not verify_password(credentials.password, self.config.password_hash):
            return False
        with self._lock:
            self._verified.add(digest)
        return True


basic_credentials = HTTPBasic(auto_error=False)


def require_basic_auth(
    request: Request,
    credentials: Optional[HTTPBasicCredentials] = Depends(basic_credentials),
) -> None:
    """Dependency: reject the request unless the app's guard accepts it"""
    guard: BasicAuthGuard = request.app.state.auth_guard
    if not guard.check(credentials):
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid credentials",
            headers={"WWW-Authenticate": "Basic"},
        )
