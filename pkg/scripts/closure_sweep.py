"""Loop-closure counts for 1NN-ratio and kNN policies over a range of k.

Needs a dataset from ``segloc synth`` and a model from ``segloc train``.

    python3 scripts/closure_sweep.py DATA MODEL [--k 2,5,10,25]
"""
import argparse

from threadpoolctl import threadpool_limits

from segloc.evaluation import closure_stats
from segloc.nn.model import load_checkpoint
from segloc.pipeline import SEQ_DB, closure_run, final_db, load_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data")
    ap.add_argument("model")
    ap.add_argument("--k", default="2,5,10,25")
    ap.add_argument("--radius", type=float, default=30.0)
    ap.add_argument("--every", type=int, default=3)
    args = ap.parse_args()
    exp = load_experiment(args.data)
    params = load_checkpoint(args.model)
    with threadpool_limits(1):
        db = final_db(params, exp.drives[SEQ_DB])
        runs = [("1nn", 1)] + [("25nn", int(k)) for k in args.k.split(",")]
        print("policy,k,correct,incorrect,mean_error")
        for policy, k in runs:
            s = closure_stats(closure_run(params, exp, policy, args.every, args.radius, k, db=db))
            name = "1nn-ratio" if policy == "1nn" else "knn"
            print(f"{name},{k},{s.n_correct},{s.n_incorrect},{s.mean_error_text()}")


if __name__ == "__main__":
    main()
