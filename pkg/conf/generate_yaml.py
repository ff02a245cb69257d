# generate_yaml.py
# Render experiment configs from the templates in conf/template.

# For importing utils
import sys
sys.path.append("..")

from jinja2 import Template
from utils import MODELS, PROFILES, SEEDS, SNR_VALUES_DB, CHANGEPOINT_SAMPLES, \
    CHANGEPOINT_MU
import argparse
import os


if __name__ == "__main__":

    parser = argparse.ArgumentParser(
        prog='Generate yaml for experiments',
        description='Generate experiment configs for jode.py')
    parser.add_argument('model',
                        choices=MODELS.keys(),
                        help='Registered model')
    parser.add_argument('random_seed', type=int, nargs='?', default=SEEDS[0],
                        help="Random seed")
    parser.add_argument('-p', '--profile', choices=PROFILES.keys(), default="desk",
                        help="Scale profile")
    parser.add_argument('-s', '--snr', type=float, nargs='+', default=SNR_VALUES_DB,
                        help="SNR values in dB (radar)")
    parser.add_argument('-r', '--region', choices=["disc", "ellipse"], default="disc",
                        help="Surveillance region construction (radar)")
    parser.add_argument('--snr_reference', choices=["integration", "matched"],
                        default="matched", help="Energy convention for the SNR (radar)")
    parser.add_argument('--mu', type=float, default=CHANGEPOINT_MU,
                        help="Post-change mean (changepoint)")
    parser.add_argument('--n_samples', type=int, default=CHANGEPOINT_SAMPLES,
                        help="Series length (changepoint)")
    parser.add_argument('-b', '--beta', type=float, default=None,
                        help="Miss probability of the single-step test")

    # Get args
    args = parser.parse_args()
    entry = MODELS[args.model]

    # Create directory for yaml
    yaml_directory = f"{args.model}_{args.profile}"
    if not os.path.exists(yaml_directory):
        os.makedirs(yaml_directory)

    print(f"Generating {args.model} experiment yaml file...")

    template_file = open(f"template/{entry['kind']}_template.yaml")
    template = Template(template_file.read())
    template_file.close()

    if entry["kind"] == "radar":
        m, n = (int(k) for k in args.model.split("_")[1].split("x"))
        conf = template.render(
            m=m,
            n=n,
            snr_db=", ".join(f"{s:g}" for s in args.snr),
            snr_reference=args.snr_reference,
            profile=args.profile,
            beta=args.beta,
            region=args.region,
            seed=args.random_seed,
        )
    else:
        conf = template.render(
            n_samples=args.n_samples,
            mu=args.mu,
            profile=args.profile,
            beta=args.beta,
            seed=args.random_seed,
        )

    yaml_file = open(f"{yaml_directory}/seed{args.random_seed}.yaml", "w")
    yaml_file.write(conf)
    yaml_file.close()
    print(f"Wrote {yaml_directory}/seed{args.random_seed}.yaml")
