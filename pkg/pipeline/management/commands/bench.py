from pipeline import services
from pipeline.management.base import PipelineCommand
from pipeline.reports import emit_report


class Command(PipelineCommand):
    help = 'Benchmark a .plite model image by image and report t_infer_1, mean, std and ste.'
    subcommand = 'bench'
    flags = ('model', 'data', 'backend', 'n_images', 'seed', 'output_format', 'output')

    def add_command_arguments(self, parser):
        parser.add_argument('--save', help='Also store the benchmark record as JSON at this path.')

    def run(self, config, options):
        report = services.run_bench(config)
        if report.single_sample:
            self.stdout.write(self.style.WARNING('single warm sample: std and ste are 0'))
        self.emit(emit_report([report], config.output_format), config)
        if options['save']:
            services.save_report(report, options['save'])
            self.stdout.write(self.style.SUCCESS(f"Saved record {options['save']}"))
