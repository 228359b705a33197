from django.db import migrations, models


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="TrainingRun",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("dataset_dir", models.CharField(max_length=512)),
                ("output_dir", models.CharField(max_length=512)),
                ("estimator", models.CharField(choices=[("control_variate", "Control variate"), ("joint_score", "Joint score"), ("pathwise", "Pathwise")], default="control_variate", max_length=20)),
                ("seed", models.BigIntegerField(default=0)),
                ("config_json", models.JSONField(blank=True, default=dict)),
                ("status", models.CharField(choices=[("PENDING", "Pending"), ("RUNNING", "Running"), ("DONE", "Done"), ("FAILED", "Failed")], default="PENDING", max_length=12)),
                ("iteration", models.PositiveIntegerField(default=0)),
                ("final_psnr", models.FloatField(blank=True, null=True)),
                ("error_message", models.TextField(blank=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("completed_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "ordering": ["-created_at"],
            },
        ),
    ]
