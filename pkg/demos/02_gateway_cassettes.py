"""Route calls to a mock backend, record them to a cassette, then replay offline."""

from __future__ import annotations

import tempfile
from pathlib import Path

from vera import Cassette, Gateway, MockBackend, ModelProfile, fingerprint
from vera.errors import VeraError

profile = ModelProfile("echo", "generator", "mock:echo")
messages = [("system", "Be brief."), ("user", "Name a prime number.")]

# mock rules: first matching regex (or callable) wins
gw = Gateway(cassette_mode="record")
gw.register_mock("echo", MockBackend([(r"prime", "7"), (r".*", "no idea")]))
ex = gw.complete(profile, messages)
print("recorded:", ex.response_text, "| fingerprint", fingerprint(messages)[:12])

path = Path(tempfile.mkdtemp()) / "calls.jsonl"
gw.cassette.save(path)

# replay ignores the endpoint entirely, so no mock or network is needed
replay = Gateway(cassette=Cassette.load(path), cassette_mode="replay")
print("replayed:", replay.complete(profile, messages).response_text)

try:
    replay.complete(profile, [("user", "Something never recorded.")])
except VeraError as exc:
    print("miss:", type(exc).__name__)
