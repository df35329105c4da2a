"""Ownership and license verification chain.

Three ownership tests (integrity by branch-accuracy difference, performance
fidelity, signature sign agreement) followed by two license tests (passport
visual similarity, key-revealed ID similarity). The license verdict is
conditional on the full ownership verdict; reports always contain all five
records so failing early never hides evidence.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
import time
from dataclasses import dataclass

from .signature import derive_signature, extract_signature, sign_agreement
from .stego import psnr
from .training import branch_accuracy


class VerificationError(RuntimeError):
    pass


@dataclass
class Thresholds:
    """Pass thresholds; tau_d and tau_f are in accuracy percentage points."""

    tau_d: float = 0.05
    tau_f: float = 0.0
    tau_xi: float = 0.93
    tau_p: float = 39.0
    tau_r: float = 41.0

    def __post_init__(self):
        if not 0.5 < self.tau_xi <= 1.0:
            raise ValueError(f"tau_xi must lie in (0.5, 1], got {self.tau_xi}")
        if self.tau_p <= 0 or self.tau_r <= 0:
            raise ValueError("PSNR thresholds must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class CheckRecord:
    name: str
    measured: float
    threshold: float
    passed: bool

    def to_dict(self):
        return dataclasses.asdict(self)


class VerificationReport:
    """All five test records plus the two verdicts and artifact digests."""

    TEST_NAMES = ("ownership_integrity", "ownership_fidelity", "ownership_signature",
                  "license_passport", "license_id")

    def __init__(self, records, digests=None, timestamp=None):
        by_name = {r.name: r for r in records}
        missing = [n for n in self.TEST_NAMES if n not in by_name]
        if missing:
            raise VerificationError(f"report is missing test records: {missing}")
        self.records = [by_name[n] for n in self.TEST_NAMES]
        self.digests = dict(digests or {})
        self.timestamp = timestamp if timestamp is not None else time.time()

    def record(self, name) -> CheckRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def ownership_verdict(self) -> bool:
        return all(self.record(n).passed for n in self.TEST_NAMES[:3])

    @property
    def license_verdict(self) -> bool:
        return self.ownership_verdict and all(
            self.record(n).passed for n in self.TEST_NAMES[3:])

    def to_dict(self):
        return {
            "tests": [r.to_dict() for r in self.records],
            "ownership_verdict": self.ownership_verdict,
            "license_verdict": self.license_verdict,
            "digests": self.digests,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text) -> "VerificationReport":
        doc = json.loads(text)
        records = [CheckRecord(t["name"], t["measured"], t["threshold"], t["passed"])
                   for t in doc["tests"]]
        return cls(records, doc.get("digests", {}), doc.get("timestamp"))

    def save(self, path):
        # atomic: temp file in the target directory, then rename
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(self.to_json())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "VerificationReport":
        with open(path) as fh:
            return cls.from_json(fh.read())


# ----- individual tests --------------------------------------------------------


def verify_integrity(deployed_model, owner_model, test_set, tau_d: float = 0.05,
                     passports=None):
    """Absolute accuracy difference (percentage points) between the
    owner-restored verification branch and the deployed model."""
    if len(test_set) == 0:
        raise VerificationError("integrity test needs a non-empty test set")
    acc_deploy = branch_accuracy(deployed_model, test_set, "deploy")
    acc_verify = branch_accuracy(owner_model, test_set, "verify", passports=passports)
    ad = abs(acc_verify - acc_deploy)
    return ad, ad < tau_d


def verify_fidelity(owner_model, test_set, tau_f: float, passports=None,
                    branch: str = "verify"):
    """Mean accuracy of the owner-restored model must exceed tau_f."""
    acc = branch_accuracy(owner_model, test_set, branch, passports=passports)
    return acc, acc > tau_f


def verify_signature_test(model, passports, tau_xi: float = 0.93,
                          mode: str = "post"):
    """Sign agreement between the hash-derived and the extracted signature.

    mode='pre': an untainted pre-deployment model must reach SA exactly 1.0;
    mode='post': the post-distribution tolerance tau_xi applies."""
    if mode not in ("pre", "post"):
        raise ValueError(f"mode must be 'pre' or 'post', got {mode!r}")
    xi = derive_signature([p.gamma_image for p in passports],
                          model.channel_counts())
    xi_star = extract_signature(model, passports)
    sa = sign_agreement(xi, xi_star)
    passed = sa == 1.0 if mode == "pre" else sa >= tau_xi
    return sa, passed


def pair_psnr(pairs_a, pairs_b) -> float:
    """Mean PSNR over all gamma/beta images of aligned passport pair lists."""
    if len(pairs_a) != len(pairs_b):
        raise VerificationError("passport lists must align")
    values = []
    for a, b in zip(pairs_a, pairs_b):
        values.append(psnr(a.gamma_image, b.gamma_image))
        values.append(psnr(a.beta_image, b.beta_image))
    return sum(values) / len(values)


def verify_license_passport(owner_passports, user_passports, tau_p: float = 39.0):
    """Visual similarity between owner- and user-side passports."""
    value = pair_psnr(owner_passports, user_passports)
    return value, value > tau_p


def verify_license_id(user_passports, key, id_image, isn, tau_r: float = 41.0):
    """Reveal the ID from every user-side pair, compare to the registered ID."""
    values = []
    for pair in user_passports:
        revealed = isn.reveal(pair, key)
        values.append(psnr(id_image, revealed))
    value = sum(values) / len(values)
    return value, value > tau_r


# ----- the chain -----------------------------------------------------------------


def run_chain(deployed_model, owner_model, test_set, owner_passports,
              thresholds: Thresholds, user_passports=None, key=None,
              id_image=None, isn=None, license_owner_passports=None,
              digests=None, signature_mode: str = "post") -> VerificationReport:
    """Execute the three ownership tests, then the two license tests.

    owner_passports feed the model tests at the network input resolution;
    license_owner_passports are the same sources at the stego resolution
    (defaulting to owner_passports when the resolutions coincide). License
    artifacts may be omitted when only ownership is being verified; the
    license records are then marked failed with NaN measurements rather than
    dropped, keeping the report complete.
    """
    records = []
    ad, ok = verify_integrity(deployed_model, owner_model, test_set,
                              thresholds.tau_d, passports=owner_passports)
    records.append(CheckRecord("ownership_integrity", ad, thresholds.tau_d, ok))
    acc, ok = verify_fidelity(owner_model, test_set, thresholds.tau_f,
                              passports=owner_passports)
    records.append(CheckRecord("ownership_fidelity", acc, thresholds.tau_f, ok))
    sa, ok = verify_signature_test(owner_model, owner_passports,
                                   thresholds.tau_xi, mode=signature_mode)
    records.append(CheckRecord("ownership_signature", sa, thresholds.tau_xi, ok))

    if user_passports is not None and key is not None and isn is not None \
            and id_image is not None:
        stego_side = license_owner_passports or owner_passports
        value, ok = verify_license_passport(stego_side, user_passports,
                                            thresholds.tau_p)
        records.append(CheckRecord("license_passport", value, thresholds.tau_p, ok))
        value, ok = verify_license_id(user_passports, key, id_image, isn,
                                      thresholds.tau_r)
        records.append(CheckRecord("license_id", value, thresholds.tau_r, ok))
    else:
        records.append(CheckRecord("license_passport", float("nan"),
                                  thresholds.tau_p, False))
        records.append(CheckRecord("license_id", float("nan"),
                                  thresholds.tau_r, False))
    return VerificationReport(records, digests=digests)
