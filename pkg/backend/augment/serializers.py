from rest_framework import serializers

from .domain import DOMAINS, BoundingBox, ImageSample, ObjectAnnotation
from .exceptions import InvalidGeometry


class StrictSerializer(serializers.Serializer):
    """Rejects keys the schema does not declare (typos in configs and dumps)."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: 'Unknown field.' for key in unknown})
        return super().to_internal_value(data)


# ==========================================
# WIRE FORMATS
# ==========================================

class BoxFieldsMixin:
    @staticmethod
    def build_box(box):
        try:
            return BoundingBox(box['x0'], box['y0'], box['x1'], box['y1'])
        except InvalidGeometry as exc:
            raise serializers.ValidationError(str(exc))


class ObjectRecordSerializer(BoxFieldsMixin, StrictSerializer):
    label = serializers.CharField()
    x0 = serializers.FloatField(source='box.x0')
    y0 = serializers.FloatField(source='box.y0')
    x1 = serializers.FloatField(source='box.x1')
    y1 = serializers.FloatField(source='box.y1')
    occlusion = serializers.FloatField(source='occlusion_fraction', min_value=0.0, max_value=1.0)
    ignore = serializers.BooleanField(default=False)

    def validate(self, attrs):
        attrs['box'] = self.build_box(attrs['box'])
        return attrs

    def create(self, validated_data):
        return ObjectAnnotation(**validated_data)


class ManifestRecordSerializer(StrictSerializer):
    image_id = serializers.CharField()
    image_path = serializers.CharField(allow_null=True, required=False, default=None)
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    domain = serializers.ChoiceField(choices=DOMAINS)
    source_image_id = serializers.CharField(allow_null=True, required=False, default=None)
    objects = ObjectRecordSerializer(many=True, source='annotations')

    def to_representation(self, instance):
        data = super().to_representation(instance)
        if data.get('source_image_id') is None:
            data.pop('source_image_id', None)
        return data

    def create(self, validated_data):
        annotations = tuple(
            ObjectAnnotation(**item) for item in validated_data.pop('annotations')
        )
        try:
            return ImageSample(annotations=annotations, **validated_data)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))


class DetectionRecordSerializer(BoxFieldsMixin, StrictSerializer):
    image_id = serializers.CharField()
    x0 = serializers.FloatField(source='box.x0')
    y0 = serializers.FloatField(source='box.y0')
    x1 = serializers.FloatField(source='box.x1')
    y1 = serializers.FloatField(source='box.y1')
    score = serializers.FloatField()

    def validate(self, attrs):
        attrs['box'] = self.build_box(attrs['box'])
        return attrs

    def create(self, validated_data):
        from .evaluation import Detection
        return Detection(**validated_data)


class PatchVerdictSerializer(BoxFieldsMixin, StrictSerializer):
    x0 = serializers.FloatField(source='box.x0')
    y0 = serializers.FloatField(source='box.y0')
    x1 = serializers.FloatField(source='box.x1')
    y1 = serializers.FloatField(source='box.y1')
    label = serializers.ChoiceField(choices=('pedestrian', 'background'))
    confidence = serializers.FloatField(min_value=0.0, max_value=1.0)

    def validate(self, attrs):
        attrs['box'] = self.build_box(attrs['box'])
        return attrs


class CurationRecordSerializer(StrictSerializer):
    image_id = serializers.CharField()
    stage1_score = serializers.FloatField(allow_null=True)
    stage1_pass = serializers.BooleanField(allow_null=True)
    stage2_verdicts = PatchVerdictSerializer(many=True)
    final_status = serializers.ChoiceField(choices=('kept', 'rejected', 'quarantined'))
    reason = serializers.CharField(allow_null=True)

    def create(self, validated_data):
        from .curation import CurationRecord, PatchVerdict
        verdicts = tuple(PatchVerdict(**v) for v in validated_data.pop('stage2_verdicts'))
        return CurationRecord(stage2_verdicts=verdicts, **validated_data)


class CalibrationLabelSerializer(StrictSerializer):
    """One human verdict on a translated image, used to calibrate the stage-1 threshold."""
    image_id = serializers.CharField()
    label = serializers.ChoiceField(choices=('accepted', 'rejected'))

    def create(self, validated_data):
        return validated_data['image_id'], validated_data['label']


class LossReportSerializer(StrictSerializer):
    step = serializers.IntegerField(min_value=0)
    raw = serializers.DictField(child=serializers.FloatField())
    weights = serializers.DictField(child=serializers.FloatField())
    total = serializers.FloatField()
    wall_time = serializers.FloatField(required=False, allow_null=True)

    def to_representation(self, instance):
        data = super().to_representation(instance)
        if data.get('wall_time') is None:
            data.pop('wall_time', None)
        return data

    def create(self, validated_data):
        from .objectives import LossReport
        return LossReport(**validated_data)


class ArtifactMetaSerializer(StrictSerializer):
    """Sidecar written next to JSONL artifacts that cannot carry a header."""
    kind = serializers.CharField()
    config_hash = serializers.CharField(allow_null=True)
    records = serializers.IntegerField(min_value=0)


# ==========================================
# RUN CONFIGURATION SCHEMA
# Every field: default + provenance tag.
#   [published] value stated with the method's original training recipe
#   [decision]  our default where the recipe is silent
# ==========================================

class RunSectionSerializer(StrictSerializer):
    name = serializers.CharField(default='run', help_text='[decision] run label used in file names')
    seed = serializers.IntegerField(default=0, help_text='[decision] master seed; every RNG stream derives from it')


class BackboneSectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=('toy',), default='toy',
                                   help_text='[decision] generator backbone adapter')
    mode = serializers.ChoiceField(choices=('identity', 'darkening'), default='identity',
                                   help_text='[decision] toy backbone prior')
    prompt_dim = serializers.IntegerField(default=16, min_value=1,
                                          help_text='[decision] width of the fixed prompt embedding')
    prompt_path = serializers.CharField(allow_null=True, default=None,
                                        help_text='[decision] safetensors file holding the offline prompt embedding')


class ScheduleSectionSerializer(StrictSerializer):
    alpha = serializers.FloatField(default=0.7, min_value=0.0, max_value=1.0,
                                   help_text='[decision] signal coefficient at t*; sigma = sqrt(1 - alpha^2)')
    timestep = serializers.IntegerField(default=999, min_value=0,
                                        help_text='[decision] fixed one-step timestep t*')
    resample_noise = serializers.BooleanField(default=True,
                                              help_text='[decision] draw fresh epsilon every training step')


class LoraSectionSerializer(StrictSerializer):
    rank = serializers.IntegerField(default=8, min_value=1, help_text='[decision] adapter rank r')
    scale = serializers.FloatField(default=1.0, help_text='[decision] delta multiplier (no alpha/r scaling)')
    max_rank_fraction = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0,
                                               help_text='[decision] r <= fraction * min(d, k)')
    targets = serializers.ListField(child=serializers.CharField(), allow_empty=True, default=list,
                                    help_text='[published] attach to all adaptable weights; empty means every named weight')
    rank_overrides = serializers.DictField(child=serializers.IntegerField(min_value=1), default=dict,
                                           help_text='[decision] per-target rank')


class EncoderSectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=('toy-stats', 'toy-intensity', 'dinov2'), default='toy-stats',
                                   help_text='[decision] semantic encoder adapter')
    model_id = serializers.CharField(default='facebook/dinov2-giant',
                                     help_text='[published] checkpoint for the dinov2 adapter')
    layers = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_null=True, default=None,
                                   help_text='[published] default: five blocks ending one before the final block')
    feature_source = serializers.ChoiceField(choices=('semantic', 'generator'), default='semantic',
                                             help_text='[published] contrastive features from the frozen encoder or the generator encoder (ablation)')


class ContrastiveSectionSerializer(StrictSerializer):
    num_patches = serializers.IntegerField(default=128, min_value=1, help_text='[published] N_p sampled indices')
    projection_dim = serializers.IntegerField(default=256, min_value=1, help_text='[published] head output width d')
    tau = serializers.FloatField(default=0.07, help_text='[decision] hDCE temperature')
    gamma = serializers.FloatField(default=0.5, help_text='[published] hard-negative concentration')
    ramp_steps = serializers.IntegerField(default=12000, min_value=0,
                                          help_text='[published] linear ramp of the contrastive weights')

    def validate(self, attrs):
        for key in ('tau', 'gamma'):
            if attrs[key] <= 0:
                raise serializers.ValidationError({key: 'Must be positive.'})
        return attrs


class WeightsSectionSerializer(StrictSerializer):
    src = serializers.FloatField(default=1.0, min_value=0.0, help_text='[published] lambda_SRC')
    hdce = serializers.FloatField(default=1.0, min_value=0.0, help_text='[published] lambda_hDCE')
    det = serializers.FloatField(default=0.5, min_value=0.0, help_text='[published] lambda_det')
    idt = serializers.FloatField(default=0.1, min_value=0.0, help_text='[published] lambda_idt')
    adv = serializers.FloatField(default=0.01, min_value=0.0, help_text='[published] lambda_adv')
    box = serializers.FloatField(default=7.5, min_value=0.0, help_text='[published] detector box weight')
    cls = serializers.FloatField(default=0.5, min_value=0.0, help_text='[published] detector class weight')
    dfl = serializers.FloatField(default=1.5, min_value=0.0, help_text='[published] detector DFL weight')


class AdversarialSectionSerializer(StrictSerializer):
    non_saturating = serializers.BooleanField(default=False,
                                              help_text='[decision] use -log D(fake) instead of log(1 - D(fake))')
    perceptual = serializers.BooleanField(default=False,
                                          help_text='[published] feed frozen-encoder features to the discriminator')
    updates_per_step = serializers.IntegerField(default=1, min_value=0,
                                                help_text='[decision] discriminator updates per generator update')
    lr = serializers.FloatField(default=1e-5, help_text='[published] discriminator learning rate')


class OptimizerSectionSerializer(StrictSerializer):
    lr = serializers.FloatField(default=1e-5, help_text='[published] generator learning rate')
    weight_decay = serializers.FloatField(default=1e-2, min_value=0.0, help_text='[published] decoupled weight decay')
    beta1 = serializers.FloatField(default=0.9, help_text='[decision] Adam beta1')
    beta2 = serializers.FloatField(default=0.999, help_text='[decision] Adam beta2')


class TrainingSectionSerializer(StrictSerializer):
    total_steps = serializers.IntegerField(default=25000, min_value=0, help_text='[published] generator steps')
    batch_size = serializers.IntegerField(default=1, min_value=1, help_text='[published] images per domain per step')
    checkpoint_every = serializers.IntegerField(default=1000, min_value=0,
                                                help_text='[decision] checkpoint cadence; 0 keeps only the final one')


class DetectorSectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=('toy',), default='toy', help_text='[decision] guidance detector adapter')
    checkpoint = serializers.CharField(allow_null=True, default=None,
                                       help_text='[decision] pre-trained detector weights; fitted on day data if absent')
    fit_steps = serializers.ListField(child=serializers.IntegerField(min_value=0), default=lambda: [150, 150],
                                      help_text='[published] staged fine-tuning: head-only steps, then full steps')
    fit_lr = serializers.FloatField(default=1e-3, help_text='[published] SGD learning rate for detector fitting')
    score_threshold = serializers.FloatField(default=0.05, min_value=0.0, max_value=1.0,
                                             help_text='[decision] minimum score kept in detection dumps')


class CurationSectionSerializer(StrictSerializer):
    threshold = serializers.FloatField(default=0.95, help_text='[published] stage-1 fidelity threshold')
    crop_width = serializers.IntegerField(default=8, min_value=1, help_text='[decision] negative crop width')
    crop_height = serializers.IntegerField(default=16, min_value=1, help_text='[decision] negative crop height')
    negatives_per_image = serializers.IntegerField(default=4, min_value=0, help_text='[decision] mined crops per scene')
    attempt_budget = serializers.IntegerField(default=10000, min_value=1, help_text='[decision] rejection-sampling budget')
    classifier_steps = serializers.IntegerField(default=200, min_value=0, help_text='[decision] toy classifier training steps')


class EvaluationSectionSerializer(StrictSerializer):
    iou_threshold = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0,
                                           help_text='[published] match threshold')
    fppi_min = serializers.FloatField(default=1e-2, help_text='[published] low end of the FPPI range')
    fppi_max = serializers.FloatField(default=1.0, help_text='[published] high end of the FPPI range')
    fppi_points = serializers.IntegerField(default=9, min_value=1, help_text='[decision] log-spaced reference points')
    num_projections = serializers.IntegerField(default=128, min_value=1, help_text='[decision] sliced WD projections')
    subsets = serializers.ListField(child=serializers.CharField(),
                                    default=lambda: ['Reasonable', 'Small', 'Heavy', 'All'],
                                    help_text='[published] subsets reported')


class MixingSectionSerializer(StrictSerializer):
    ratios = serializers.ListField(child=serializers.FloatField(min_value=0.0),
                                   default=lambda: [0.0, 0.05, 0.10, 0.20],
                                   help_text='[published] real-night injection ratios')
    seed = serializers.IntegerField(default=0, help_text='[decision] sampling seed for real-night injection')


class LoggingSectionSerializer(StrictSerializer):
    record_wall_time = serializers.BooleanField(default=False,
                                                help_text='[decision] embed wall time in the training log')


class RunConfigSerializer(StrictSerializer):
    run = RunSectionSerializer()
    backbone = BackboneSectionSerializer()
    schedule = ScheduleSectionSerializer()
    lora = LoraSectionSerializer()
    encoder = EncoderSectionSerializer()
    contrastive = ContrastiveSectionSerializer()
    weights = WeightsSectionSerializer()
    adversarial = AdversarialSectionSerializer()
    optimizer = OptimizerSectionSerializer()
    training = TrainingSectionSerializer()
    detector = DetectorSectionSerializer()
    curation = CurationSectionSerializer()
    evaluation = EvaluationSectionSerializer()
    mixing = MixingSectionSerializer()
    logging = LoggingSectionSerializer()

    def to_internal_value(self, data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise serializers.ValidationError('Run config must be a mapping.')
        # Missing sections validate as empty mappings so their defaults apply.
        filled = {name: {} for name in self.fields}
        filled.update({k: (v if v is not None else {}) for k, v in data.items()})
        return super().to_internal_value(filled)
