from django.core.management.base import CommandError

from pipeline import services
from pipeline.management.base import PipelineCommand


class Command(PipelineCommand):
    help = 'Re-export a model in canonical .plite form; optionally write a folder-per-class image set.'
    subcommand = 'export'
    flags = ('model', 'data', 'seed', 'limit', 'output')

    def add_command_arguments(self, parser):
        parser.add_argument('--images', help='Write the --data images here as <class>/<index>.pgm files.')
        parser.add_argument('--prefix', default='t10k', help='IDX file prefix to read from --data (default t10k).')

    def run(self, config, options):
        if options['images'] and not config.data:
            raise CommandError('export --images requires --data')
        size, written = services.export_model(config, options['images'], options['prefix'])
        self.stdout.write(self.style.SUCCESS(f"Wrote {config.output} ({size} bytes)"))
        if options['images']:
            self.stdout.write(self.style.SUCCESS(f"Wrote {written} images under {options['images']}"))
