//! Embedded Runge-Kutta 8(5,3) pair of Dormand and Prince (DOP853).
//!
//! Only the single-step kernel and a step-size controller live here; the
//! callers own their loops because each needs its own stopping rules
//! (event location in fictitious time, node-aware step clamps, fixed
//! checkpoints). Events are located by re-stepping from the start of the
//! accepted step, which keeps them at the full order of the method.

/// Right-hand side of `dy/dt = f(t, y)`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N]) -> [f64; N];
}

impl<const N: usize, F> OdeSystem<N> for F
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    fn rhs(&self, t: f64, y: &[f64; N]) -> [f64; N] {
        self(t, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol }
    }

    pub fn halved(self) -> Self {
        Self { rtol: self.rtol / 2.0, atol: self.atol / 2.0 }
    }
}

/// Result of one trial step.
#[derive(Debug, Clone, Copy)]
pub struct Trial<const N: usize> {
    pub y: [f64; N],
    /// Scaled error norm; the step is acceptable when `err <= 1`.
    pub err: f64,
}

const C2: f64 = 0.526001519587677318785587544488e-1;
const C3: f64 = 0.789002279381515978178381316732e-1;
const C4: f64 = 0.118350341907227396726757197510;
const C5: f64 = 0.281649658092772603273242802490;
const C6: f64 = 0.333333333333333333333333333333;
const C7: f64 = 0.25;
const C8: f64 = 0.307692307692307692307692307692;
const C9: f64 = 0.651282051282051282051282051282;
const C10: f64 = 0.6;
const C11: f64 = 0.857142857142857142857142857142;

const A21: f64 = 5.26001519587677318785587544488e-2;
const A31: f64 = 1.97250569845378994544595329183e-2;
const A32: f64 = 5.91751709536136983633785987549e-2;
const A41: f64 = 2.95875854768068491816892993775e-2;
const A43: f64 = 8.87627564304205475450678981324e-2;
const A51: f64 = 2.41365134159266685502369798665e-1;
const A53: f64 = -8.84549479328286085344864962717e-1;
const A54: f64 = 9.24834003261792003115737966543e-1;
const A61: f64 = 3.7037037037037037037037037037e-2;
const A64: f64 = 1.70828608729473871279604482173e-1;
const A65: f64 = 1.25467687566822425016691814123e-1;
const A71: f64 = 3.7109375e-2;
const A74: f64 = 1.70252211019544039314978060272e-1;
const A75: f64 = 6.02165389804559606850219397283e-2;
const A76: f64 = -1.7578125e-2;
const A81: f64 = 3.70920001185047927108779319836e-2;
const A84: f64 = 1.70383925712239993810214054705e-1;
const A85: f64 = 1.07262030446373284651809199168e-1;
const A86: f64 = -1.53194377486244017527936158236e-2;
const A87: f64 = 8.27378916381402288758473766002e-3;
const A91: f64 = 6.24110958716075717114429577812e-1;
const A94: f64 = -3.36089262944694129406857109825;
const A95: f64 = -8.68219346841726006818189891453e-1;
const A96: f64 = 2.75920996994467083049415600797e1;
const A97: f64 = 2.01540675504778934086186788979e1;
const A98: f64 = -4.34898841810699588477366255144e1;
const A101: f64 = 4.77662536438264365890433908527e-1;
const A104: f64 = -2.48811461997166764192642586468;
const A105: f64 = -5.90290826836842996371446475743e-1;
const A106: f64 = 2.12300514481811942347288949897e1;
const A107: f64 = 1.52792336328824235832596922938e1;
const A108: f64 = -3.32882109689848629194453265587e1;
const A109: f64 = -2.03312017085086261358222928593e-2;
const A111: f64 = -9.3714243008598732571704021658e-1;
const A114: f64 = 5.18637242884406370830023853209;
const A115: f64 = 1.09143734899672957818500254654;
const A116: f64 = -8.14978701074692612513997267357;
const A117: f64 = -1.85200656599969598641566180701e1;
const A118: f64 = 2.27394870993505042818970056734e1;
const A119: f64 = 2.49360555267965238987089396762;
const A1110: f64 = -3.0467644718982195003823669022;
const A121: f64 = 2.27331014751653820792359768449;
const A124: f64 = -1.05344954667372501984066689879e1;
const A125: f64 = -2.00087205822486249909675718444;
const A126: f64 = -1.79589318631187989172765950534e1;
const A127: f64 = 2.79488845294199600508499808837e1;
const A128: f64 = -2.85899827713502369474065508674;
const A129: f64 = -8.87285693353062954433549289258;
const A1210: f64 = 1.23605671757943030647266201528e1;
const A1211: f64 = 6.43392746015763530355970484046e-1;

const B1: f64 = 5.42937341165687622380535766363e-2;
const B6: f64 = 4.45031289275240888144113950566;
const B7: f64 = 1.89151789931450038304281599044;
const B8: f64 = -5.8012039600105847814672114227;
const B9: f64 = 3.1116436695781989440891606237e-1;
const B10: f64 = -1.52160949662516078556178806805e-1;
const B11: f64 = 2.01365400804030348374776537501e-1;
const B12: f64 = 4.47106157277725905176885569043e-2;

const BHH1: f64 = 0.244094488188976377952755905512;
const BHH2: f64 = 0.733846688281611857341361741547;
const BHH3: f64 = 0.220588235294117647058823529412e-1;

const ER1: f64 = 0.1312004499419488073250102996e-1;
const ER6: f64 = -0.1225156446376204440720569753e1;
const ER7: f64 = -0.4957589496572501915214079952;
const ER8: f64 = 0.1664377182454986536961530415e1;
const ER9: f64 = -0.3503288487499736816886487290;
const ER10: f64 = 0.3341791187130174790297318841;
const ER11: f64 = 0.8192320648511571246570742613e-1;
const ER12: f64 = -0.2235530786388629525884427845e-1;

#[inline]
fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        let ch = c * h;
        for i in 0..N {
            out[i] += ch * k[i];
        }
    }
    out
}

/// One DOP853 trial step of size `h` from `(t, y)`, where `k1 = f(t, y)`.
pub fn dop853_step<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
    tol: Tolerances,
) -> Trial<N> {
    let k2 = sys.rhs(t + C2 * h, &combine(y, h, &[(A21, k1)]));
    let k3 = sys.rhs(t + C3 * h, &combine(y, h, &[(A31, k1), (A32, &k2)]));
    let k4 = sys.rhs(t + C4 * h, &combine(y, h, &[(A41, k1), (A43, &k3)]));
    let k5 = sys.rhs(t + C5 * h, &combine(y, h, &[(A51, k1), (A53, &k3), (A54, &k4)]));
    let k6 = sys.rhs(t + C6 * h, &combine(y, h, &[(A61, k1), (A64, &k4), (A65, &k5)]));
    let k7 = sys.rhs(
        t + C7 * h,
        &combine(y, h, &[(A71, k1), (A74, &k4), (A75, &k5), (A76, &k6)]),
    );
    let k8 = sys.rhs(
        t + C8 * h,
        &combine(y, h, &[(A81, k1), (A84, &k4), (A85, &k5), (A86, &k6), (A87, &k7)]),
    );
    let k9 = sys.rhs(
        t + C9 * h,
        &combine(
            y,
            h,
            &[(A91, k1), (A94, &k4), (A95, &k5), (A96, &k6), (A97, &k7), (A98, &k8)],
        ),
    );
    let k10 = sys.rhs(
        t + C10 * h,
        &combine(
            y,
            h,
            &[(A101, k1), (A104, &k4), (A105, &k5), (A106, &k6), (A107, &k7), (A108, &k8), (A109, &k9)],
        ),
    );
    let k11 = sys.rhs(
        t + C11 * h,
        &combine(
            y,
            h,
            &[
                (A111, k1),
                (A114, &k4),
                (A115, &k5),
                (A116, &k6),
                (A117, &k7),
                (A118, &k8),
                (A119, &k9),
                (A1110, &k10),
            ],
        ),
    );
    let k12 = sys.rhs(
        t + h,
        &combine(
            y,
            h,
            &[
                (A121, k1),
                (A124, &k4),
                (A125, &k5),
                (A126, &k6),
                (A127, &k7),
                (A128, &k8),
                (A129, &k9),
                (A1210, &k10),
                (A1211, &k11),
            ],
        ),
    );

    let mut y_new = [0.0; N];
    let mut err5 = 0.0;
    let mut err3 = 0.0;
    for i in 0..N {
        let incr = B1 * k1[i]
            + B6 * k6[i]
            + B7 * k7[i]
            + B8 * k8[i]
            + B9 * k9[i]
            + B10 * k10[i]
            + B11 * k11[i]
            + B12 * k12[i];
        y_new[i] = y[i] + h * incr;
        let sk = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
        let e3 = incr - BHH1 * k1[i] - BHH2 * k9[i] - BHH3 * k12[i];
        let e5 = ER1 * k1[i]
            + ER6 * k6[i]
            + ER7 * k7[i]
            + ER8 * k8[i]
            + ER9 * k9[i]
            + ER10 * k10[i]
            + ER11 * k11[i]
            + ER12 * k12[i];
        err3 += (e3 / sk).powi(2);
        err5 += (e5 / sk).powi(2);
    }
    let mut deno = err5 + 0.01 * err3;
    if deno <= 0.0 {
        deno = 1.0;
    }
    let err = h.abs() * err5 * (1.0 / (deno * N as f64)).sqrt();
    Trial { y: y_new, err: if err.is_finite() { err } else { f64::INFINITY } }
}

/// Step-size control with Lund stabilization, as in Hairer's DOP853.
#[derive(Debug, Clone)]
pub struct StepController {
    facold: f64,
    last_rejected: bool,
}

impl Default for StepController {
    fn default() -> Self {
        Self { facold: 1e-4, last_rejected: false }
    }
}

impl StepController {
    const SAFE: f64 = 0.9;
    const FAC_MIN: f64 = 0.333;
    const FAC_MAX: f64 = 6.0;
    const BETA: f64 = 0.0;
    const EXPO: f64 = 1.0 / 8.0 - Self::BETA * 0.2;

    /// Returns `(accept, next_h)`.
    pub fn judge(&mut self, h: f64, err: f64) -> (bool, f64) {
        if !err.is_finite() {
            self.last_rejected = true;
            return (false, h * 0.1);
        }
        let fac11 = err.powf(Self::EXPO);
        let fac = fac11 / self.facold.powf(Self::BETA);
        let fac = (1.0 / Self::FAC_MAX).max((1.0 / Self::FAC_MIN).min(fac / Self::SAFE));
        let mut h_new = h / fac;
        if err <= 1.0 {
            self.facold = err.max(1e-4);
            if self.last_rejected {
                h_new = if h > 0.0 { h_new.min(h) } else { h_new.max(h) };
            }
            self.last_rejected = false;
            (true, h_new)
        } else {
            self.last_rejected = true;
            (false, h / (1.0 / Self::FAC_MIN).min(fac11 / Self::SAFE))
        }
    }
}

/// Initial step guess (Hairer's `hinit`, simplified to one extra evaluation).
pub fn initial_step<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64; N],
    f0: &[f64; N],
    tol: Tolerances,
    h_max: f64,
) -> f64 {
    let sk = |i: usize| tol.atol + tol.rtol * y[i].abs();
    let dnf = (0..N).map(|i| (f0[i] / sk(i)).powi(2)).sum::<f64>();
    let dny = (0..N).map(|i| (y[i] / sk(i)).powi(2)).sum::<f64>();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(h_max);
    let y1 = combine(y, h, &[(1.0, f0)]);
    let f1 = sys.rhs(t + h, &y1);
    let der2 = ((0..N).map(|i| ((f1[i] - f0[i]) / sk(i)).powi(2)).sum::<f64>()).sqrt() / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(1.0 / 8.0)
    };
    (100.0 * h).min(h1).min(h_max)
}
