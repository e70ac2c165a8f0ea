#!/usr/bin/env python3
"""Fixture solver driven entirely by its flags.

usage: scripted_solver.py INSTANCE [--schedule=T:B,...] [--model=LITS] [--after=MODE] [--seed=N]

Burns CPU until each scheduled CPU time T and prints ``o B``; prints ``v LITS``
(literals separated by , or ;) once the schedule is done; then, per MODE:
exit, sleep, busy (spin forever), alloc (grow memory without bound), crash.
"""
import signal
import sys
import time


def spin_until(t):
    while time.process_time() < t:
        pass


def main(argv):
    opts = dict(a[2:].split("=", 1) for a in argv[2:] if a.startswith("--") and "=" in a)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    for item in filter(None, opts.get("schedule", "none").replace(";", ",").split(",")):
        if item == "none":
            continue
        t, b = item.split(":")
        spin_until(float(t))
        print(f"o {b}", flush=True)
    if opts.get("model", "none") != "none":
        print("v " + opts["model"].replace(",", " ").replace(";", " "), flush=True)
    after = opts.get("after", "exit")
    if after == "sleep":
        while True:
            time.sleep(0.1)
    elif after == "busy":
        while True:
            pass
    elif after == "alloc":
        hog = []
        while True:
            hog.append(b"x" * (8 * 1024 * 1024))
            time.sleep(0.005)
    elif after == "crash":
        sys.exit(3)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
