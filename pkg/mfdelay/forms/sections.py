"""Per-section forms for experiment files."""
from wtforms import Field, FieldList, FloatField, Form, IntegerField, StringField
from wtforms.validators import AnyOf, InputRequired, Length, NumberRange, Optional, StopValidation, ValidationError

from mfdelay.config import get_config
from mfdelay.models.delay import MEASURE_KINDS

CONTROL_KINDS = ('constant', 'optimal')
INFORMATION_MODES = ('full', 'delayed')
HORIZON_KINDS = ('finite', 'infinite')


class OfType:
    """Stop validation unless the TOML value has one of the given types.

    Integers count as floats; booleans never count as numbers.
    """

    def __init__(self, *kinds):
        self.kinds = kinds

    def __call__(self, form, field):
        value = field.object_data
        if value is None:
            return
        accepted = self.kinds + ((int,) if float in self.kinds else ())
        if isinstance(value, bool) or not isinstance(value, accepted):
            field.errors[:] = []
            names = ' or '.join(kind.__name__ for kind in self.kinds)
            raise StopValidation(f"expected {names}, got {type(value).__name__}")


class GreaterThan:
    def __init__(self, bound):
        self.bound = bound

    def __call__(self, form, field):
        if field.data is None or not field.data > self.bound:
            raise ValidationError(f"must be > {self.bound}, got {field.data}")


def number(kind=float, *validators, default=None):
    """Optional numeric field with strict typing."""
    field_class = IntegerField if kind is int else FloatField
    return field_class(validators=[OfType(kind), Optional(), *validators], default=default)


def choice(values, default):
    return StringField(validators=[OfType(str), AnyOf(values)], default=default)


def number_list(*entry_validators, min_length=None):
    validators = [Optional()]
    if min_length:
        validators.append(Length(min=min_length, message=f"expected at least {min_length} entries"))
    return FieldList(FloatField(validators=[OfType(float), *entry_validators]), validators=validators)


class SectionForm(Form):
    """One TOML table bound as form data.

    Keys present in the table count as submitted input, so Optional and
    InputRequired see the same thing they would on a posted form.
    """

    def __init__(self, section, path):
        super().__init__()
        self.path = path
        self.unknown = [key for key in section if key not in self]
        self.shape_errors = []
        data = {}
        for field in self:
            if field.name not in section:
                continue
            value = section[field.name]
            if isinstance(field, FieldList) and not isinstance(value, list):
                self.shape_errors.append(f"{path}.{field.name}: expected a list, got {type(value).__name__}")
                continue
            data[field.name] = value
        self.process(data=data)
        for field in self:
            field.raw_data = [data[field.name]] if field.name in data else []

    def messages(self):
        """Every problem in the table, unknown keys first."""
        found = [f"unknown key '{self.path}.{key}'" for key in self.unknown] + self.shape_errors
        self.validate()
        for name, errors in self.errors.items():
            entries = [error for error in errors if isinstance(error, list)]
            for i, entry in enumerate(entries):
                if entry:
                    found.append(f"{self.path}.{name}[{i}]: {entry[0]}")
            found.extend(f"{self.path}.{name}: {error}" for error in errors if isinstance(error, str))
        return found


class ModelForm(SectionForm):
    name = StringField(default='recursive_utility')
    a = number(default=0.0)
    x0 = number(default=1.0)
    bounds = FieldList(FloatField(validators=[OfType(float)]), validators=[
        Optional(),
        Length(min=2, max=2, message='expected [lower, upper]'),
    ])
    horizon = choice(HORIZON_KINDS, 'finite')
    kappa = number(float, NumberRange(min=0), default=0.0)
    params = Field(validators=[OfType(dict)])
    expressions = Field(validators=[OfType(dict)])

    def __init__(self, section, path):
        super().__init__(section, path)
        models = [name for name, _ in get_config().BUILTIN_MODELS]
        self.name.validators = [OfType(str), AnyOf(models)]


class GridForm(SectionForm):
    T = number(float, GreaterThan(0))
    dt = number(float, GreaterThan(0))
    delta = number(float, NumberRange(min=0), default=0.0)


class ControlForm(SectionForm):
    kind = choice(CONTROL_KINDS, 'constant')
    value = number()
    scale = number(default=1.0)


class MeasureForm(SectionForm):
    """One entry of delay.measures."""
    kind = StringField(validators=[InputRequired(), OfType(str), AnyOf(MEASURE_KINDS)])
    rate = number()
    offsets = FieldList(FloatField(validators=[OfType(float)]))
    masses = FieldList(FloatField(validators=[OfType(float)]))

    def validate_offsets(self, field):
        if self.kind.data == 'discrete' and not field.data:
            raise ValidationError('a discrete measure needs at least one atom')

    def validate_masses(self, field):
        if self.kind.data == 'discrete' and len(field.data) != len(self.offsets.data):
            raise ValidationError(f"{len(field.data)} masses for {len(self.offsets.data)} offsets")


class DelayForm(SectionForm):
    measures = Field(validators=[OfType(list)])

    def messages(self):
        found = super().messages()
        if not isinstance(self.measures.data, list):
            return found
        for i, entry in enumerate(self.measures.data):
            path = f"{self.path}.measures[{i}]"
            if not isinstance(entry, dict):
                found.append(f"{path}: expected a table, got {type(entry).__name__}")
            else:
                found.extend(MeasureForm(entry, path).messages())
        return found


class JumpsForm(SectionForm):
    marks = number_list()
    weights = number_list(GreaterThan(0))


class SimulationForm(SectionForm):
    n_particles = number(int, NumberRange(min=1))
    seed = number(int, NumberRange(min=0))
    threads = number(int, NumberRange(min=1), default=1)


class BasisForm(SectionForm):
    degree = number(int, NumberRange(min=0))
    ridge = number(float, NumberRange(min=0))


class InformationForm(SectionForm):
    mode = choice(INFORMATION_MODES, 'full')
    lag = number(float, NumberRange(min=0), default=0.0)


class ChecksForm(SectionForm):
    run = FieldList(StringField(validators=[OfType(str)]), validators=[Optional()])
    gradient_bumps = number(int, NumberRange(min=1))
    fd_step = number(float, GreaterThan(0))
    transversality_T = number_list(GreaterThan(0), min_length=2)
    transversality_particles = number(int, NumberRange(min=1))
    scaling_alphas = number_list(GreaterThan(0), min_length=2)
    probe_points = number(int, NumberRange(min=1))


class TolerancesForm(SectionForm):
    residual_sigmas = number(float, NumberRange(min=0))
    residual_slack = number(float, NumberRange(min=0))
    gradient_slack = number(float, NumberRange(min=0))
    slope_tolerance = number(float, NumberRange(min=0))
    fubini = number(float, NumberRange(min=0))
    bsde = number(float, NumberRange(min=0))


class OutputForm(SectionForm):
    dir = StringField(validators=[OfType(str)])


SECTION_FORMS = {
    'model': ModelForm,
    'grid': GridForm,
    'control': ControlForm,
    'delay': DelayForm,
    'jumps': JumpsForm,
    'simulation': SimulationForm,
    'basis': BasisForm,
    'information': InformationForm,
    'checks': ChecksForm,
    'tolerances': TolerancesForm,
    'output': OutputForm,
}
