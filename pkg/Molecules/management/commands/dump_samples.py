from Molecules.experiments import cmd_dump_samples

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Write generated molecules as SMILES; invalid ones are marked '# invalid'."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True, help='Checkpoint file written by train.')
        parser.add_argument('--samples', type=int, default=10, help='Number of molecules to generate.')

    def run(self, **options):
        seed = options['seed'] if options['seed'] is not None else 0
        path = cmd_dump_samples(options['checkpoint'], options['samples'], seed, options['out'])
        self.stdout.write(self.style.SUCCESS(f"Samples written to {path}"))
