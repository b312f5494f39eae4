"""RSA mutual authentication, RS256 tokens and JWKS entries.

Challenge envelopes are standard Base64 (padded) around a compact JSON
object ``{"ek", "iv", "ct"}``: ``ct`` is AES-256-GCM over the inner JSON
``{"m", "sig"}`` and ``ek`` is the content key wrapped with RSA-OAEP(SHA-256)
for the peer.  Tokens are RFC 7519 compact JWS with unpadded Base64url.

All decoders are strict: a segment must re-encode to exactly the text it
came from, so two different strings never verify as the same token.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import json
import os
import uuid
from dataclasses import dataclass, field
from typing import Any, Mapping

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .model import TokenClaims, TokenHeader, ValidationError

NONCE_SIZE = 32
MIN_KEY_BITS = 2048
_OAEP = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)
_PKCS1 = padding.PKCS1v15()


class CryptoError(Exception):
    pass


class KeySizeError(CryptoError):
    pass


class MalformedEnvelope(CryptoError):
    pass


class DecryptionError(CryptoError):
    pass


class SignatureInvalid(CryptoError):
    pass


class TokenError(CryptoError):
    reason = "invalid"


class MalformedToken(TokenError):
    reason = "malformed"


class BadSignature(TokenError):
    reason = "bad-signature"


class TokenExpired(TokenError):
    reason = "expired"


class AudienceMismatch(TokenError):
    reason = "audience-mismatch"


class InvalidClaims(TokenError):
    reason = "invalid-claims"


@dataclass(frozen=True)
class KeyPair:
    kid: str
    private_key: rsa.RSAPrivateKey = field(repr=False)

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self.private_key.public_key()

    def with_kid(self, kid: str) -> KeyPair:
        return KeyPair(kid, self.private_key)


def generate_keypair(bits: int = MIN_KEY_BITS) -> KeyPair:
    if bits < MIN_KEY_BITS:
        raise KeySizeError(f"RSA keys must be at least {MIN_KEY_BITS} bits")
    return KeyPair(str(uuid.uuid4()), rsa.generate_private_key(public_exponent=65537, key_size=bits))


def private_key_to_pem(key: rsa.RSAPrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )


def public_key_to_pem(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_private_key(pem: bytes, trusted: bool = False) -> rsa.RSAPrivateKey:
    """``trusted`` skips the (slow) RSA consistency checks; only for keys we generated."""
    key = serialization.load_pem_private_key(pem, password=None, unsafe_skip_rsa_key_validation=trusted)
    if not isinstance(key, rsa.RSAPrivateKey):
        raise CryptoError("not an RSA private key")
    return key


def load_public_key(pem: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_pem_public_key(pem)
    if not isinstance(key, rsa.RSAPublicKey):
        raise CryptoError("not an RSA public key")
    return key


# -- strict Base64 helpers ---------------------------------------------------

def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: Any) -> bytes:
    if not isinstance(text, str):
        raise ValueError("expected Base64 text")
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"invalid Base64: {exc}") from None
    if base64.b64encode(raw).decode("ascii") != text:
        raise ValueError("non-canonical Base64")
    return raw


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not text or any(c not in _URLSAFE for c in text):
        raise ValueError("invalid Base64url")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"invalid Base64url: {exc}") from None
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical Base64url")
    return raw


_URLSAFE = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_")


def _compact_json(obj: Any) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")


# -- challenge / counter -----------------------------------------------------

def _check_key_sizes(*keys: rsa.RSAPrivateKey | rsa.RSAPublicKey) -> None:
    for key in keys:
        if key.key_size < MIN_KEY_BITS:
            raise KeySizeError(f"{key.key_size}-bit key is below {MIN_KEY_BITS} bits")


def _seal(m: bytes, signer_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey) -> str:
    if not isinstance(m, bytes) or len(m) != NONCE_SIZE:
        raise ValueError(f"nonce must be exactly {NONCE_SIZE} bytes")
    _check_key_sizes(signer_priv, peer_pub)
    sig = signer_priv.sign(m, _PKCS1, hashes.SHA256())
    inner = _compact_json({"m": b64encode(m), "sig": b64encode(sig)})
    cek = AESGCM.generate_key(bit_length=256)
    iv = os.urandom(12)
    ct = AESGCM(cek).encrypt(iv, inner, None)
    ek = peer_pub.encrypt(cek, _OAEP)
    outer = _compact_json({"ek": b64encode(ek), "iv": b64encode(iv), "ct": b64encode(ct)})
    return b64encode(outer)


def _unseal(envelope: str, own_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey) -> bytes:
    try:
        outer = json.loads(b64decode(envelope))
        if not isinstance(outer, dict) or set(outer) != {"ek", "iv", "ct"}:
            raise ValueError("envelope must hold exactly ek, iv, ct")
        ek, iv, ct = (b64decode(outer[k]) for k in ("ek", "iv", "ct"))
        if len(iv) != 12:
            raise ValueError("iv must be 12 bytes")
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedEnvelope(str(exc)) from None

    try:
        cek = own_priv.decrypt(ek, _OAEP)
        inner_raw = AESGCM(cek).decrypt(iv, ct, None)
    except (ValueError, InvalidTag):
        raise DecryptionError("envelope does not decrypt under this key") from None

    try:
        inner = json.loads(inner_raw)
        if not isinstance(inner, dict) or set(inner) != {"m", "sig"}:
            raise ValueError("sealed content must hold exactly m, sig")
        m, sig = b64decode(inner["m"]), b64decode(inner["sig"])
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedEnvelope(str(exc)) from None
    if len(m) != NONCE_SIZE:
        raise MalformedEnvelope("nonce has the wrong length")
    if len(sig) != peer_pub.key_size // 8:
        raise SignatureInvalid("signature length does not match the peer key")
    try:
        peer_pub.verify(sig, m, _PKCS1, hashes.SHA256())
    except InvalidSignature:
        raise SignatureInvalid("nonce signature does not verify under the peer key") from None
    return m


def new_nonce() -> bytes:
    return os.urandom(NONCE_SIZE)


def build_challenge(m: bytes, signer_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey) -> str:
    """Sign ``m``, then seal nonce and signature so only the peer can read them."""
    return _seal(m, signer_priv, peer_pub)


def open_challenge(envelope: str, own_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey) -> bytes:
    """Recover the nonce from a challenge, authenticating its sender.

    Raises MalformedEnvelope, DecryptionError or SignatureInvalid.
    """
    return _unseal(envelope, own_priv, peer_pub)


def build_counter(m: bytes, own_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey) -> str:
    return _seal(m, own_priv, peer_pub)


def verify_counter(
    envelope: str, own_priv: rsa.RSAPrivateKey, peer_pub: rsa.RSAPublicKey, expected_m: bytes
) -> bool:
    """True iff the counter carries ``expected_m`` signed by the peer.

    A malformed envelope still raises MalformedEnvelope; every
    authentication failure (wrong key, bad signature, other nonce) is False.
    """
    try:
        m = _unseal(envelope, own_priv, peer_pub)
    except (DecryptionError, SignatureInvalid):
        return False
    return hmac.compare_digest(m, expected_m)


# -- RS256 tokens ------------------------------------------------------------

def issue_jwt(claims: TokenClaims, key: KeyPair) -> str:
    if not isinstance(claims, TokenClaims):
        raise InvalidClaims("claims must be TokenClaims")
    header = TokenHeader(kid=key.kid)
    signing_input = b64url_encode(_compact_json(header.to_dict())) + "." + b64url_encode(
        _compact_json(claims.to_dict())
    )
    sig = key.private_key.sign(signing_input.encode("ascii"), _PKCS1, hashes.SHA256())
    return signing_input + "." + b64url_encode(sig)


def _split(token: Any) -> tuple[str, str, str]:
    if not isinstance(token, str) or token.count(".") != 2:
        raise MalformedToken("token must have exactly three segments")
    h, p, s = token.split(".")
    return h, p, s


def parse_header(token: str) -> TokenHeader:
    h, _, _ = _split(token)
    try:
        data = json.loads(b64url_decode(h))
        if not isinstance(data, dict) or set(data) != {"alg", "typ", "kid"}:
            raise ValueError("header must hold exactly alg, typ, kid")
        return TokenHeader(kid=data["kid"], alg=data["alg"], typ=data["typ"])
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedToken(f"bad header: {exc}") from None


def parse_unverified(token: str) -> tuple[TokenHeader, TokenClaims, bytes]:
    header = parse_header(token)
    _, p, s = _split(token)
    try:
        payload = json.loads(b64url_decode(p))
        if not isinstance(payload, dict):
            raise ValueError("payload must be an object")
        claims = TokenClaims.from_dict(payload)
        sig = b64url_decode(s)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedToken(f"bad token body: {exc}") from None
    return header, claims, sig


def verify_jwt(token: str, pub: rsa.RSAPublicKey, expected_aud: str, now: float) -> TokenClaims:
    """Return the claims iff the signature holds, ``now < exp`` and aud matches.

    Checks run in that order; each failure has its own exception.
    """
    _, claims, sig = parse_unverified(token)
    signing_input = token.rsplit(".", 1)[0].encode("ascii")
    try:
        pub.verify(sig, signing_input, _PKCS1, hashes.SHA256())
    except InvalidSignature:
        raise BadSignature("token signature does not verify") from None
    if now >= claims.exp:
        raise TokenExpired(f"token expired at {claims.exp}")
    if claims.aud != expected_aud:
        raise AudienceMismatch(f"token is for {claims.aud}, not {expected_aud}")
    return claims


# -- JWKS --------------------------------------------------------------------

def _int_to_b64url(n: int) -> str:
    return b64url_encode(n.to_bytes((n.bit_length() + 7) // 8, "big"))


def jwks_entry(key: KeyPair) -> dict[str, str]:
    numbers = key.public_key.public_numbers()
    return {
        "kty": "RSA",
        "kid": key.kid,
        "use": "sig",
        "alg": "RS256",
        "n": _int_to_b64url(numbers.n),
        "e": _int_to_b64url(numbers.e),
    }


def public_key_from_jwk(jwk: Mapping[str, Any]) -> rsa.RSAPublicKey:
    try:
        if jwk["kty"] != "RSA":
            raise ValueError("kty must be RSA")
        n = int.from_bytes(b64url_decode(jwk["n"]), "big")
        e = int.from_bytes(b64url_decode(jwk["e"]), "big")
        key = rsa.RSAPublicNumbers(e, n).public_key()
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedToken(f"unusable JWK: {exc}") from None
    _check_key_sizes(key)
    return key


__all__ = [
    "AudienceMismatch",
    "BadSignature",
    "CryptoError",
    "DecryptionError",
    "InvalidClaims",
    "KeyPair",
    "KeySizeError",
    "MalformedEnvelope",
    "MalformedToken",
    "NONCE_SIZE",
    "SignatureInvalid",
    "TokenError",
    "TokenExpired",
    "ValidationError",
    "build_challenge",
    "build_counter",
    "generate_keypair",
    "issue_jwt",
    "jwks_entry",
    "open_challenge",
    "parse_header",
    "public_key_from_jwk",
    "verify_counter",
    "verify_jwt",
]
