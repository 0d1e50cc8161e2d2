use super::tensor::Tensor;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable tensors with gradient slots and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        self.first_moment.push(Tensor::zeros(r, c));
        self.second_moment.push(Tensor::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor, &mut Tensor, &Tensor) {
        let i = id.0;
        (
            &mut self.values[i],
            &mut self.first_moment[i],
            &mut self.second_moment[i],
            &self.grads[i],
        )
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.first_moment[id.0], &self.second_moment[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Keeps the listed rows of one parameter along with its gradient and
    /// optimizer moments.
    pub fn retain_rows(&mut self, id: ParamId, keep: &[usize]) {
        let i = id.0;
        self.values[i] = self.values[i].select_rows(keep);
        self.grads[i] = self.grads[i].select_rows(keep);
        self.first_moment[i] = self.first_moment[i].select_rows(keep);
        self.second_moment[i] = self.second_moment[i].select_rows(keep);
    }

    /// Replaces a parameter's value, resetting its gradient and moments when
    /// the shape changes.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        let i = id.0;
        if value.shape() != self.values[i].shape() {
            let (r, c) = value.shape();
            self.grads[i] = Tensor::zeros(r, c);
            self.first_moment[i] = Tensor::zeros(r, c);
            self.second_moment[i] = Tensor::zeros(r, c);
        }
        self.values[i] = value;
    }
}
