"""Session crypto for the covert stream.

Design constraints drive some unusual choices here:

* Everything must be reproducible from a seed, because simulation
  reports are compared bit for bit across runs.  Library RSA key
  generation is not seedable, so key pairs are produced by a seeded
  Miller-Rabin search and the asymmetric padding is derived
  deterministically from the message and recipient key.  This trades
  away semantic security, which is acceptable for a research artifact
  whose adversary model is a rule-based traffic monitor.
* Symmetric encryption is AES-256 in CBC mode, keyed by the SHA-256 of
  a 16-octet negotiated secret.  Ciphertext must be exactly as long as
  plaintext so capacity accounting is identical with and without
  encryption: full blocks are chained normally and a trailing partial
  block is XORed with the encryption of the current chain value.
* The chain runs across all segments of one stream item and resets at
  the next item, so a desynchronized item never poisons the session.

Synchronization headers never pass through any of this; they are
always plaintext on the wire.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

BLOCK = 16
RSA_BITS = 2048
RSA_BYTES = RSA_BITS // 8
SECRET_LEN = 16

KE_PUBKEY = 0x01
KE_SYMKEY = 0x02
KE_CIPHER_ON = 0x03

ROLE_GENERATOR = "generator"
ROLE_RECEIVER = "receiver"

_ROLE_OCTET = {ROLE_GENERATOR: 0x01, ROLE_RECEIVER: 0x02}

_SMALL_PRIMES = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
                 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
                 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251]


class CryptoError(Exception):
    pass


class MacTie(CryptoError):
    """Both MAC addresses share the same low 32 bits; roles undecidable."""


class NotEstablished(CryptoError):
    pass


class BadCiphertext(CryptoError):
    pass


# ---------------------------------------------------------------------------
# Deterministic RSA


@dataclass(frozen=True)
class RsaPublicKey:
    n: int
    e: int

    def to_bytes(self) -> bytes:
        e_bytes = self.e.to_bytes((self.e.bit_length() + 7) // 8 or 1, "big")
        n_bytes = self.n.to_bytes((self.n.bit_length() + 7) // 8 or 1, "big")
        return struct.pack("!H", len(e_bytes)) + e_bytes + struct.pack("!H", len(n_bytes)) + n_bytes

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RsaPublicKey":
        if len(blob) < 2:
            raise CryptoError("public key blob truncated")
        (e_len,) = struct.unpack_from("!H", blob, 0)
        offset = 2 + e_len
        if len(blob) < offset + 2:
            raise CryptoError("public key blob truncated")
        e = int.from_bytes(blob[2:offset], "big")
        (n_len,) = struct.unpack_from("!H", blob, offset)
        body = blob[offset + 2 : offset + 2 + n_len]
        if len(body) != n_len:
            raise CryptoError("public key blob truncated")
        return cls(n=int.from_bytes(body, "big"), e=e)


@dataclass(frozen=True)
class RsaKeyPair:
    public: RsaPublicKey
    d: int


def _is_probable_prime(n: int, rng: random.Random, rounds: int = 40) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 2)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = (x * x) % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _gen_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if _is_probable_prime(candidate, rng):
            return candidate


_keypair_cache: dict = {}


def generate_keypair(seed: int, bits: int = RSA_BITS) -> RsaKeyPair:
    """Deterministic RSA key pair for ``seed``; memoized, 2048-bit modulus."""
    cached = _keypair_cache.get((seed, bits))
    if cached is not None:
        return cached
    rng = random.Random(seed)
    e = 65537
    while True:
        p = _gen_prime(bits // 2, rng)
        q = _gen_prime(bits // 2, rng)
        if p == q:
            continue
        phi = (p - 1) * (q - 1)
        n = p * q
        if n.bit_length() != bits:
            continue
        try:
            d = pow(e, -1, phi)
        except ValueError:
            continue
        pair = RsaKeyPair(public=RsaPublicKey(n=n, e=e), d=d)
        _keypair_cache[(seed, bits)] = pair
        return pair


def _pad_stream(tag: bytes, length: int) -> bytes:
    """Deterministic non-zero padding bytes derived from ``tag``."""
    out = bytearray()
    counter = 0
    while len(out) < length:
        block = hashlib.sha256(tag + counter.to_bytes(4, "big")).digest()
        out += bytes((b % 255) + 1 for b in block)
        counter += 1
    return bytes(out[:length])


def rsa_encrypt(pub: RsaPublicKey, message: bytes) -> bytes:
    """Encrypt a short message to a fixed 256-octet block.

    Padding layout follows the familiar 00 02 PS 00 M shape but the
    padding string is derived from hash(key, message) so the same
    inputs always yield the same ciphertext.
    """
    key_bytes = (pub.n.bit_length() + 7) // 8
    ps_len = key_bytes - 3 - len(message)
    if ps_len < 8:
        raise CryptoError("message too long for modulus")
    tag = hashlib.sha256(pub.to_bytes() + message).digest()
    block = b"\x00\x02" + _pad_stream(tag, ps_len) + b"\x00" + message
    c = pow(int.from_bytes(block, "big"), pub.e, pub.n)
    return c.to_bytes(key_bytes, "big")


def rsa_decrypt(pair: RsaKeyPair, ciphertext: bytes) -> bytes:
    key_bytes = (pair.public.n.bit_length() + 7) // 8
    if len(ciphertext) != key_bytes:
        raise BadCiphertext("ciphertext must be %d octets" % key_bytes)
    c = int.from_bytes(ciphertext, "big")
    if c >= pair.public.n:
        raise BadCiphertext("ciphertext out of range")
    block = pow(c, pair.d, pair.public.n).to_bytes(key_bytes, "big")
    if block[0] != 0x00 or block[1] != 0x02:
        raise BadCiphertext("bad padding frame")
    try:
        sep = block.index(b"\x00", 2)
    except ValueError:
        raise BadCiphertext("padding separator missing") from None
    return block[sep + 1 :]


# ---------------------------------------------------------------------------
# Role selection and key derivation


def mac_tail(mac: bytes) -> int:
    """Numeric value of the right-most 32 bits of a MAC address."""
    if len(mac) != 6:
        raise ValueError("MAC address must be 6 octets")
    return int.from_bytes(mac[2:], "big")


def choose_generator(local_mac: bytes, remote_mac: bytes) -> bool:
    """True when the local side generates the symmetric key."""
    local, remote = mac_tail(local_mac), mac_tail(remote_mac)
    if local == remote:
        raise MacTie("MAC tails are equal; key generator role is undecidable")
    return local > remote


def derive_cipher_key(secret: bytes) -> bytes:
    if len(secret) != SECRET_LEN:
        raise CryptoError("symmetric secret must be %d octets" % SECRET_LEN)
    return hashlib.sha256(secret).digest()


def derive_iv(key: bytes, role: str) -> bytes:
    return hashlib.sha256(key + bytes([_ROLE_OCTET[role]])).digest()[:BLOCK]


# ---------------------------------------------------------------------------
# Length-preserving CBC stream


def _aes_ecb(key: bytes):
    return Cipher(algorithms.AES(key), modes.ECB())


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def encrypt_stream(key: bytes, iv: bytes, data: bytes) -> bytes:
    """CBC over full blocks; the trailing partial block is XORed with
    the encryption of the chain value.  Output length equals input
    length, and the transform is independent of how the stream was cut
    into carrier segments."""
    full = len(data) - (len(data) % BLOCK)
    enc = _aes_ecb(key).encryptor()
    out = bytearray()
    chain = iv
    for i in range(0, full, BLOCK):
        chain = enc.update(_xor(data[i : i + BLOCK], chain))
        out += chain
    tail = data[full:]
    if tail:
        pad = enc.update(chain)
        out += _xor(tail, pad[: len(tail)])
    enc.finalize()
    return bytes(out)


def decrypt_stream(key: bytes, iv: bytes, data: bytes) -> bytes:
    full = len(data) - (len(data) % BLOCK)
    enc = _aes_ecb(key).encryptor()
    dec = _aes_ecb(key).decryptor()
    out = bytearray()
    chain = iv
    for i in range(0, full, BLOCK):
        block = data[i : i + BLOCK]
        out += _xor(dec.update(block), chain)
        chain = block
    tail = data[full:]
    if tail:
        pad = enc.update(chain)
        out += _xor(tail, pad[: len(tail)])
    enc.finalize()
    dec.finalize()
    return bytes(out)


# ---------------------------------------------------------------------------
# Key-exchange messages


def encode_ke_message(msg_type: int, mac: bytes, payload: bytes) -> bytes:
    """[type:1][MAC:6][length:2][payload]."""
    if len(mac) != 6:
        raise ValueError("MAC address must be 6 octets")
    if len(payload) > 0xFFFF:
        raise ValueError("key exchange payload too long")
    return bytes([msg_type]) + mac + struct.pack("!H", len(payload)) + payload


KE_PREFIX = 9


def decode_ke_message(blob: bytes) -> Tuple[int, bytes, bytes]:
    if len(blob) < KE_PREFIX:
        raise CryptoError("key exchange message truncated")
    msg_type = blob[0]
    mac = blob[1:7]
    (length,) = struct.unpack_from("!H", blob, 7)
    payload = blob[KE_PREFIX : KE_PREFIX + length]
    if len(payload) != length:
        raise CryptoError("key exchange payload truncated")
    return msg_type, mac, payload


@dataclass
class CryptoSession:
    """Negotiated state for one gateway pair.

    ``tx_iv`` seeds the chain for items this side emits, ``rx_iv`` for
    items it receives; the generator role octet feeds the generator's
    transmit IV so the two directions never share a chain.
    """

    local_mac: bytes
    keypair: RsaKeyPair
    role: Optional[str] = None
    peer_mac: Optional[bytes] = None
    peer_public: Optional[RsaPublicKey] = None
    secret: Optional[bytes] = None
    key: Optional[bytes] = None
    tx_iv: Optional[bytes] = None
    rx_iv: Optional[bytes] = None

    def install_secret(self, secret: bytes, role: str) -> None:
        self.role = role
        self.secret = secret
        self.key = derive_cipher_key(secret)
        peer_role = ROLE_RECEIVER if role == ROLE_GENERATOR else ROLE_GENERATOR
        self.tx_iv = derive_iv(self.key, role)
        self.rx_iv = derive_iv(self.key, peer_role)

    @property
    def established(self) -> bool:
        return self.key is not None

    def encrypt_item(self, plaintext: bytes) -> bytes:
        if not self.established:
            raise NotEstablished("no symmetric key installed")
        return encrypt_stream(self.key, self.tx_iv, plaintext)

    def decrypt_item(self, ciphertext: bytes) -> bytes:
        if not self.established:
            raise NotEstablished("no symmetric key installed")
        return decrypt_stream(self.key, self.rx_iv, ciphertext)


def negotiate_keys(
    local: Tuple[RsaPublicKey, bytes],
    remote: Tuple[RsaPublicKey, bytes],
    rng: random.Random,
) -> Tuple[str, List[bytes]]:
    """Decide roles from MAC tails and produce outbound key messages.

    The generator side invents the 16-octet secret and returns the
    encrypted-key message; the receiver returns no messages and waits.
    """
    local_pub, local_mac = local
    remote_pub, remote_mac = remote
    if choose_generator(local_mac, remote_mac):
        secret = rng.randbytes(SECRET_LEN)
        message = encode_ke_message(KE_SYMKEY, local_mac, rsa_encrypt(remote_pub, secret))
        return ROLE_GENERATOR, [message]
    return ROLE_RECEIVER, []
