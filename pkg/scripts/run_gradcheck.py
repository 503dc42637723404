"""Finite-difference gradient check of every topology on a 3-turn, 2-speaker conversation."""

import time

from emodyn.experiments import gradcheck_all

if __name__ == "__main__":
    t0 = time.perf_counter()
    for name, err in gradcheck_all().items():
        print(f"{name:<18} max relative error {err:.2e}")
    print(f"total {time.perf_counter() - t0:.1f}s")
