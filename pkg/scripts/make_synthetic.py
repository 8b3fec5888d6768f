"""Write a planted-rule synthetic KG (train/valid/test TSVs plus rules.txt)."""

import argparse

from vnnet.synthetic import planted_kg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--entities", type=int, default=300)
    ap.add_argument("--clusters", type=int, default=4)
    ap.add_argument("--rule-prob", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    kg = planted_kg(num_entities=args.entities, num_clusters=args.clusters, rule_prob=args.rule_prob,
                    seed=args.seed)
    d = kg.write(args.out)
    print(f"{d}: {len(kg.train)} train, {len(kg.valid)} valid, {len(kg.test)} test triples")


if __name__ == "__main__":
    main()
