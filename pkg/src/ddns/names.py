"""Domain name normalization and validation.

Names are stored as tuples of lowercase ASCII labels, without the trailing
root dot. IDNA names are expected to arrive already punycoded; there is no
Unicode processing here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

MAX_LABEL_LEN = 63
MAX_NAME_LEN = 253  # presentation form, excluding any trailing dot

# printable ASCII except "." (0x2e), the presentation-format separator
_LABEL_BYTES = re.compile(rb"[\x21-\x2d\x2f-\x7e]+\Z")


class InvalidName(ValueError):
    """A name violates label charset, label length, or total length rules."""


def label_from_wire(raw: bytes) -> str:
    """Validate and lowercase one label's bytes.

    Allowed bytes are printable ASCII (0x21..0x7e) excluding ".", which is
    reserved as the presentation-format separator; uppercase folds to
    lowercase so that comparison is case-insensitive.
    """
    if not raw:
        raise InvalidName("empty label")
    if len(raw) > MAX_LABEL_LEN:
        raise InvalidName("label exceeds %d bytes" % MAX_LABEL_LEN)
    if not _LABEL_BYTES.match(raw):
        raise InvalidName("invalid byte in label %r" % raw)
    return raw.lower().decode("ascii")


@dataclass(frozen=True)
class DomainName:
    """A normalized fully-qualified domain name.

    Construct via normalize_name(); the constructor itself does not
    re-validate. The empty tuple is the DNS root.
    """

    labels: tuple[str, ...]

    def __str__(self) -> str:
        # memoized: names are hashed and logged on every query
        cached = self.__dict__.get("_text")
        if cached is None:
            cached = ".".join(self.labels) if self.labels else "."
            object.__setattr__(self, "_text", cached)
        return cached

    def presentation_bytes(self) -> bytes:
        return str(self).encode("ascii")

    @property
    def is_root(self) -> bool:
        return not self.labels

    def last_two_labels(self) -> "DomainName":
        """The trailing two labels (the 2LD), or the name itself if shorter."""
        if len(self.labels) <= 2:
            return self
        return DomainName(self.labels[-2:])

    def ends_with(self, suffix: "DomainName") -> bool:
        """Label-boundary suffix test: "google.com" matches "www.google.com"
        and "google.com" itself, never "fakegoogle.com"."""
        n = len(suffix.labels)
        if n > len(self.labels):
            return False
        return self.labels[len(self.labels) - n:] == suffix.labels


def normalize_name(raw: str) -> DomainName:
    """Parse a presentation-format name (optional trailing dot) into a
    validated, lowercased DomainName.

    Raises InvalidName on empty labels, length violations, or bytes outside
    printable ASCII.
    """
    if raw.endswith("."):
        raw = raw[:-1]
        if not raw:
            return DomainName(())
    if not raw:
        raise InvalidName("empty name")
    labels = []
    for part in raw.split("."):
        try:
            encoded = part.encode("ascii")
        except UnicodeEncodeError:
            raise InvalidName("non-ASCII character in label %r" % part) from None
        labels.append(label_from_wire(encoded))
    name = DomainName(tuple(labels))
    if len(str(name)) > MAX_NAME_LEN:
        raise InvalidName("name exceeds %d bytes" % MAX_NAME_LEN)
    return name
