"""
Initial database migration for Empowerkit
"""
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='RunRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('mi_bench', 'MI Benchmark'), ('train', 'Train'), ('eval', 'Evaluate'), ('oracle', 'Oracle Check')], max_length=20)),
                ('run_id', models.CharField(db_index=True, max_length=100)),
                ('status', models.CharField(choices=[('ok', 'Succeeded'), ('failed', 'Failed')], max_length=10)),
                ('exit_code', models.IntegerField(default=0)),
                ('output_dir', models.CharField(max_length=500)),
                ('config_text', models.TextField(blank=True, help_text='Resolved config in key = value form')),
                ('details', models.TextField(blank=True)),
                ('started_at', models.DateTimeField()),
                ('finished_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-finished_at'],
            },
        ),
    ]
