#!/usr/bin/env python3
"""Walk one multi-round retrieval session by hand and watch it converge.

Builds a random 50-image gallery, runs the interaction loop with the toy
composer and the oracle simulator, and prints the target's rank per round
together with the ablated variants.
"""

from cirloop import EvalConfig, OracleSimulator, ToyComposer, run_session
from cirloop.ranking import NextRefPolicy
from cirloop.synthetic import make_random_gallery, make_synthetic_triplets


def show(label, trace):
    ranks = " -> ".join(str(r.target_rank) for r in trace.rounds)
    print(f"{label:24s} ranks: {ranks:24s} status: {trace.status.kind}")


def main():
    gallery = make_random_gallery(50, 16, seed=1, gallery_id="demo")
    triplet = make_synthetic_triplets(gallery, 1, seed=2)[0]
    print(f"gallery: {len(gallery)} images, d={gallery.d}")
    print(f"triplet: reference={triplet.reference_id} target={sorted(triplet.target_ids)}\n")

    composer = ToyComposer(gallery, beta=0.4, seed=0)
    simulator = OracleSimulator(alpha=0.6)

    show("mean history (default)", run_session(triplet, gallery, EvalConfig(), composer, simulator))
    show(
        "no history (last only)",
        run_session(
            triplet, gallery, EvalConfig(history_mode="last_only"), composer, simulator
        ),
    )
    show(
        "frozen caption",
        run_session(triplet, gallery, EvalConfig(feedback_mode="frozen"), composer),
    )
    show(
        "random top-10 candidate",
        run_session(
            triplet,
            gallery,
            EvalConfig(next_ref=NextRefPolicy("random_topn", 10), seed=7),
            composer,
            simulator,
        ),
    )
    show(
        "pool narrowed to 20",
        run_session(triplet, gallery, EvalConfig(pool_narrow=20), composer, simulator),
    )

    print("\nper-round detail of the default run:")
    trace = run_session(triplet, gallery, EvalConfig(), composer, simulator)
    for r in trace.rounds:
        print(
            f"  round {r.round}: ref={r.reference_id} rank={r.target_rank:3d} "
            f"caption={r.caption[:48]!r}"
        )


if __name__ == "__main__":
    main()
