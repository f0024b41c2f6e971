#!/usr/bin/env python3
"""Run every gradient-check scope and the scan benchmark in one go."""

import sys

from changecap.cli import main

if __name__ == "__main__":
    rc = main(["gradcheck", "--scope", "all"])
    rc = max(rc, main(["bench-scan", "--lengths", "512,1024,2048,4096",
                       "--impl", "seq,par"]))
    sys.exit(rc)
