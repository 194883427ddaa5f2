"""Canonical class names and payload-specific class sets."""

CLASS_NAMES: tuple[str, ...] = (
    "Benign",
    "DDoS",
    "DoS",
    "Mirai",
    "Recon",
    "Spoofing",
    "WebBased",
    "Bruteforce",
)

# attacks whose signature lives in packet content rather than traffic shape
PAYLOAD_SPECIFIC_CLASSES: frozenset[str] = frozenset({"WebBased", "Bruteforce"})
