# keeps this directory importable so tests can share helpers
