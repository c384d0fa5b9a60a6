"""Rule packaging, signature validation, lifecycle state machine, persistence.

A rule travels as a ZIP holding exactly ``rule.json`` (manifest with the
Base64-encoded script and default parameters) and ``rule.sig`` (Base64 of
the signer's raw Ed25519 public key followed by a detached signature over
the exact bytes of rule.json). The signature is checked before the manifest
JSON is ever parsed, and the container must be byte-canonical: any stray
mutation of a package is rejected, not just mutations of the signed entry.

State machine: Installed --start--> Started --stop--> Stopped --start-->
Started; Installed/Stopped --uninstall--> removed. Uninstalling a Started
rule is an invalid transition (stop first). Records persist in a single
JSON document written with temp-file + atomic rename, so the store parses
after a crash at any point between operations.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (Ed25519PrivateKey,
                                                               Ed25519PublicKey)

from .errors import (Base64Error, BadZip, EngineError, InvalidTransition, MissingEntry,
                     NameMismatch, ParseError, SignatureInvalid, TypeMismatch, UnknownParam,
                     UnknownRule, UntrustedKey)
from .registry import Scalar, coerce_scalar, scalar_type_name
from .rulescript import RuleScriptAST, parse_rule
from .runtime import RuleEngine

logger = logging.getLogger("edgerules.lifecycle")

INSTALLED, STARTED, STOPPED = "Installed", "Started", "Stopped"

MANIFEST_NAME = "rule.json"
SIGNATURE_NAME = "rule.sig"
_PUBKEY_LEN = 32
_SIG_LEN = 64


# --- packaging -------------------------------------------------------------------


def _canonical_zip(entries: list[tuple[str, bytes]]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_STORED
            info.create_system = 3
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def build_package(script_text: str, manifest_fields: dict,
                  signing_key: Ed25519PrivateKey) -> bytes:
    """Assemble and sign a rule package; the result validates round-trip."""
    ast = parse_rule(script_text)
    name = manifest_fields.get("name", ast.rule_name)
    if name != ast.rule_name:
        raise NameMismatch(f"manifest name {name!r} does not match script rule "
                           f"{ast.rule_name!r}")
    params = {k: coerce_scalar(v) for k, v in manifest_fields.get("params", {}).items()}
    manifest = {
        "name": name,
        "version": str(manifest_fields.get("version", "1.0")),
        "script": base64.b64encode(script_text.encode("utf-8")).decode("ascii"),
        "params": params,
    }
    if manifest_fields.get("description"):
        manifest["description"] = str(manifest_fields["description"])
    manifest_bytes = json.dumps(manifest, sort_keys=True,
                                separators=(",", ":")).encode("utf-8")
    pubkey = signing_key.public_key().public_bytes_raw()
    signature = signing_key.sign(manifest_bytes)
    sig_entry = base64.b64encode(pubkey + signature)
    return _canonical_zip([(MANIFEST_NAME, manifest_bytes), (SIGNATURE_NAME, sig_entry)])


@dataclass(frozen=True, slots=True)
class ValidatedPackage:
    manifest: dict
    script: str
    ast: RuleScriptAST

    @property
    def name(self) -> str:
        return self.manifest["name"]

    @property
    def version(self) -> str:
        return self.manifest["version"]

    @property
    def params(self) -> dict[str, Scalar]:
        return dict(self.manifest["params"])


def validate_package(data: bytes, trusted_keys: list[bytes]) -> ValidatedPackage:
    """Check origin and authenticity, then decode; invalid packages are discarded.

    The signature is verified over the raw rule.json bytes before any JSON
    parsing. The sig entry carries the signer's public key: a package whose
    signature is authentic under an unlisted key is UntrustedKey, anything
    that verifies under no key at all is SignatureInvalid.
    """
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            names = zf.namelist()
            for required in (MANIFEST_NAME, SIGNATURE_NAME):
                if required not in names:
                    raise MissingEntry(f"package is missing {required}")
            if sorted(names) != [MANIFEST_NAME, SIGNATURE_NAME]:
                raise BadZip(f"package must contain exactly {MANIFEST_NAME} and "
                             f"{SIGNATURE_NAME}")
            manifest_bytes = zf.read(MANIFEST_NAME)
            sig_entry = zf.read(SIGNATURE_NAME)
    except EngineError:
        raise
    except Exception as exc:  # zipfile raises a small zoo on corrupt containers
        raise BadZip(f"unreadable package: {exc}") from exc

    if _canonical_zip([(MANIFEST_NAME, manifest_bytes),
                       (SIGNATURE_NAME, sig_entry)]) != data:
        raise BadZip("package container is not in canonical form")

    try:
        sig_blob = base64.b64decode(sig_entry, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise SignatureInvalid("signature entry is not valid Base64") from exc
    if len(sig_blob) != _PUBKEY_LEN + _SIG_LEN:
        raise SignatureInvalid(f"signature entry must decode to "
                               f"{_PUBKEY_LEN + _SIG_LEN} bytes, got {len(sig_blob)}")
    claimed_key, signature = sig_blob[:_PUBKEY_LEN], sig_blob[_PUBKEY_LEN:]
    try:
        verifier = Ed25519PublicKey.from_public_bytes(claimed_key)
        verifier.verify(signature, manifest_bytes)
    except (InvalidSignature, ValueError) as exc:
        raise SignatureInvalid("signature does not verify over rule.json") from exc
    if claimed_key not in trusted_keys:
        raise UntrustedKey("package signed by a key outside the trust list")

    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"rule.json is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ParseError("rule.json must be a JSON object")
    name = manifest.get("name")
    if not isinstance(name, str) or not name:
        raise ParseError("manifest name must be a non-empty string")
    manifest["version"] = str(manifest.get("version", "0"))
    raw_params = manifest.get("params", {})
    if not isinstance(raw_params, dict):
        raise ParseError("manifest params must be an object")
    try:
        manifest["params"] = {k: coerce_scalar(v) for k, v in raw_params.items()}
    except TypeMismatch as exc:
        raise ParseError(f"manifest params must be scalars: {exc}") from exc

    encoded = manifest.get("script")
    if not isinstance(encoded, str):
        raise Base64Error("manifest script must be a Base64 string")
    try:
        script = base64.b64decode(encoded, validate=True).decode("utf-8")
    except (binascii.Error, ValueError, UnicodeDecodeError) as exc:
        raise Base64Error(f"script does not decode: {exc}") from exc
    ast = parse_rule(script)
    if ast.rule_name != name:
        raise NameMismatch(f"manifest name {name!r} does not match script rule "
                           f"{ast.rule_name!r}")
    return ValidatedPackage(manifest=manifest, script=script, ast=ast)


# --- key helpers ---------------------------------------------------------------------


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    key = Ed25519PrivateKey.generate()
    return key, key.public_key().public_bytes_raw()


def public_key_b64(key: Ed25519PrivateKey) -> str:
    return base64.b64encode(key.public_key().public_bytes_raw()).decode("ascii")


def load_private_key_pem(pem: bytes) -> Ed25519PrivateKey:
    from cryptography.hazmat.primitives.serialization import load_pem_private_key
    key = load_pem_private_key(pem, password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ParseError("signing key must be an Ed25519 private key")
    return key


def private_key_pem(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import (Encoding, NoEncryption,
                                                              PrivateFormat)
    return key.private_bytes(Encoding.PEM, PrivateFormat.PKCS8, NoEncryption())


# --- persistence ----------------------------------------------------------------------


@dataclass(slots=True)
class RuleRecord:
    name: str
    state: str
    params: dict[str, Scalar]
    defaults: dict[str, Scalar]
    package_path: str
    version: str
    sha256: str
    order: int

    def to_json(self) -> dict:
        return {"name": self.name, "state": self.state, "params": self.params,
                "defaults": self.defaults, "package_path": self.package_path,
                "version": self.version, "sha256": self.sha256, "order": self.order}

    @classmethod
    def from_json(cls, doc: dict) -> "RuleRecord":
        return cls(name=doc["name"], state=doc["state"],
                   params={k: coerce_scalar(v) for k, v in doc["params"].items()},
                   defaults={k: coerce_scalar(v) for k, v in doc["defaults"].items()},
                   package_path=doc["package_path"], version=doc["version"],
                   sha256=doc["sha256"], order=int(doc["order"]))

    def public_json(self) -> dict:
        return {"name": self.name, "state": self.state, "version": self.version,
                "params": self.params}


class StateStore:
    """Single JSON document, written via temp file + atomic rename."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def load(self) -> tuple[dict[str, RuleRecord], int]:
        if not self.path.exists():
            return {}, 1
        doc = json.loads(self.path.read_text(encoding="utf-8"))
        records = {name: RuleRecord.from_json(r) for name, r in doc["rules"].items()}
        return records, int(doc.get("next_order", len(records) + 1))

    def save(self, records: dict[str, RuleRecord], next_order: int) -> None:
        doc = {"rules": {name: r.to_json() for name, r in sorted(records.items())},
               "next_order": next_order}
        payload = json.dumps(doc, indent=2, sort_keys=True)
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# --- the manager -------------------------------------------------------------------------


class LifecycleManager:
    """Owns rule records and serializes every mutation through the scheduler."""

    def __init__(self, state_dir: str | Path, trusted_keys: list[bytes],
                 engine: RuleEngine):
        self.state_dir = Path(state_dir)
        self.packages_dir = self.state_dir / "rules"
        self.packages_dir.mkdir(parents=True, exist_ok=True)
        self.trusted_keys = list(trusted_keys)
        self.engine = engine
        self.scheduler = engine.scheduler
        self.store = StateStore(self.state_dir / "state.json")
        self._records, self._next_order = self.store.load()
        self._asts: dict[str, RuleScriptAST] = {}
        engine.set_params_provider(self.current_params)

    # -- read side ---------------------------------------------------------

    def records(self) -> list[RuleRecord]:
        return [self._records[name] for name in sorted(self._records)]

    def record(self, name: str) -> RuleRecord:
        rec = self._records.get(name)
        if rec is None:
            raise UnknownRule(f"no rule named {name!r}")
        return rec

    def current_params(self, rule_name: str) -> dict[str, Scalar] | None:
        rec = self._records.get(rule_name)
        return rec.params if rec is not None else None

    # -- mutations (serialized) ------------------------------------------------

    def install(self, package_bytes: bytes) -> RuleRecord:
        validated = validate_package(package_bytes, self.trusted_keys)
        return self.scheduler.submit(
            lambda: self._install_locked(package_bytes, validated), wait=True)

    def _install_locked(self, package_bytes: bytes, validated: ValidatedPackage) -> RuleRecord:
        name = validated.name
        existing = self._records.get(name)
        package_path = self.packages_dir / f"{name}.zip"
        digest = hashlib.sha256(package_bytes).hexdigest()
        if existing is None:
            _atomic_write(package_path, package_bytes)
            record = RuleRecord(name=name, state=INSTALLED, params=validated.params,
                                defaults=validated.params, package_path=str(package_path),
                                version=validated.version, sha256=digest,
                                order=self._next_order)
            self._next_order += 1
            self._records[name] = record
            self._asts[name] = validated.ast
            self._persist()
            return record
        # Hot update: a Started rule is stopped, replaced, and restarted with
        # its retained parameter values; no gateway restart.
        was_started = existing.state == STARTED
        if was_started:
            self.engine.stop_rule(name)
        _atomic_write(package_path, package_bytes)
        params = dict(validated.params)
        for key, value in existing.params.items():
            if key in params and scalar_type_name(value) == scalar_type_name(params[key]):
                params[key] = value
        existing.params = params
        existing.defaults = validated.params
        existing.version = validated.version
        existing.sha256 = digest
        self._asts[name] = validated.ast
        if was_started:
            try:
                self.engine.start_rule(validated.ast)
                existing.state = STARTED
            except EngineError:
                existing.state = STOPPED
                self._persist()
                raise
        self._persist()
        return existing

    def start(self, name: str) -> str:
        return self.scheduler.submit(lambda: self._start_locked(name), wait=True)

    def _start_locked(self, name: str) -> str:
        record = self.record(name)
        if record.state == STARTED:
            raise InvalidTransition(f"rule {name!r} is already Started")
        try:
            self.engine.start_rule(self._asts[name])
        except EngineError:
            record.state = STOPPED
            self._persist()
            raise
        record.state = STARTED
        self._persist()
        return record.state

    def stop(self, name: str) -> str:
        return self.scheduler.submit(lambda: self._stop_locked(name), wait=True)

    def _stop_locked(self, name: str) -> str:
        record = self.record(name)
        if record.state != STARTED:
            raise InvalidTransition(f"cannot stop a rule in state {record.state}")
        self.engine.stop_rule(name)
        record.state = STOPPED
        self._persist()
        return record.state

    def uninstall(self, name: str) -> None:
        return self.scheduler.submit(lambda: self._uninstall_locked(name), wait=True)

    def _uninstall_locked(self, name: str) -> None:
        record = self.record(name)
        if record.state == STARTED:
            raise InvalidTransition("cannot uninstall a Started rule; stop it first")
        del self._records[name]
        self._asts.pop(name, None)
        self._persist()
        try:
            os.unlink(record.package_path)
        except FileNotFoundError:
            pass

    def set_param(self, name: str, key: str, value) -> Scalar:
        return self.scheduler.submit(lambda: self._set_param_locked(name, key, value),
                                     wait=True)

    def _set_param_locked(self, name: str, key: str, value) -> Scalar:
        record = self.record(name)
        if key not in record.defaults:
            raise UnknownParam(f"rule {name!r} declares no parameter {key!r}")
        value = coerce_scalar(value)
        want = scalar_type_name(record.defaults[key])
        got = scalar_type_name(value)
        if want != got:
            raise TypeMismatch(f"parameter {key!r} is {want}, got {got}")
        record.params[key] = value
        self._persist()
        return value

    # -- boot ----------------------------------------------------------------------

    def restore_on_boot(self) -> int:
        """Re-validate every stored package and restore last execution state.

        Corrupt or invalid packages are skipped (their records removed) with
        a logged error; other rules are unaffected.
        """
        return self.scheduler.submit(self._restore_locked, wait=True)

    def _restore_locked(self) -> int:
        restored = 0
        for name in sorted(self._records, key=lambda n: self._records[n].order):
            record = self._records[name]
            try:
                data = Path(record.package_path).read_bytes()
                if hashlib.sha256(data).hexdigest() != record.sha256:
                    raise SignatureInvalid("stored package does not match the "
                                           "recorded digest")
                validated = validate_package(data, self.trusted_keys)
                if validated.name != name:
                    raise NameMismatch(f"package at {record.package_path} is for "
                                       f"{validated.name!r}")
            except (OSError, EngineError) as exc:
                logger.error("skipping rule %s: %s", name, exc)
                del self._records[name]
                continue
            self._asts[name] = validated.ast
            if record.state == STARTED:
                try:
                    self.engine.start_rule(validated.ast)
                except EngineError as exc:
                    logger.error("rule %s failed to restart: %s", name, exc)
                    record.state = STOPPED
            restored += 1
        self._persist()
        return restored

    def _persist(self) -> None:
        self.store.save(self._records, self._next_order)
