from django.core.management.base import CommandError

from edgebench.bench_harness import compare
from pipeline import services
from pipeline.management.base import PipelineCommand
from pipeline.reports import emit_comparison


class Command(PipelineCommand):
    help = 'Compare benchmark records of one model against a baseline record.'
    subcommand = 'compare'
    flags = ('reports', 'seed', 'output_format', 'output')

    def add_command_arguments(self, parser):
        parser.add_argument('--baseline', type=int, default=0,
                            help='Index into --reports of the baseline record (default 0).')

    def run(self, config, options):
        reports = [services.load_report(path) for path in config.reports]
        baseline = options['baseline']
        if not 0 <= baseline < len(reports):
            raise CommandError(f"--baseline must index one of the {len(reports)} reports")
        self.emit(emit_comparison(compare(reports, baseline), config.output_format), config)
