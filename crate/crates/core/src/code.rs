//! Simulator abstraction: the deterministic map `(x, θ) → y` being calibrated.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::data::format_float;
use crate::error::{Error, Result};

/// A deterministic scalar-output simulator.
///
/// Implementations must be callable from several threads at once.
pub trait Simulator: Send + Sync + std::fmt::Debug {
    /// Number of input variables `d`.
    fn input_dim(&self) -> usize;

    /// Number of calibration parameters `p`.
    fn n_params(&self) -> usize;

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64>;

    /// Human-readable description for summaries.
    fn describe(&self) -> String;
}

/// Damped harmonic oscillator displacement at time `t` with
/// `θ = (A, ξ, k, m, φ)`: `A·e^{−ξω₀t}·sin(√(1−ξ²)·ω₀t + φ)`, `ω₀ = √(k/m)`.
pub fn oscillator(t: f64, theta: &[f64]) -> Result<f64> {
    let &[amplitude, damping, stiffness, mass, phase] = theta else {
        return Err(Error::structural(format!(
            "oscillator takes 5 parameters, got {}",
            theta.len()
        )));
    };
    if !(mass > 0.0) || !(stiffness > 0.0) {
        return Err(Error::domain(format!(
            "oscillator needs k > 0 and m > 0 (k = {stiffness}, m = {mass})"
        )));
    }
    if !(damping.abs() < 1.0) {
        return Err(Error::domain(format!(
            "oscillator is only defined in the under-damped regime |ξ| < 1 (ξ = {damping})"
        )));
    }
    let w0 = (stiffness / mass).sqrt();
    Ok(amplitude
        * (-damping * w0 * t).exp()
        * ((1.0 - damping * damping).sqrt() * w0 * t + phase).sin())
}

/// The oscillator as a one-input, five-parameter simulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oscillator;

impl Simulator for Oscillator {
    fn input_dim(&self) -> usize {
        1
    }

    fn n_params(&self) -> usize {
        5
    }

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        if x.len() != 1 {
            return Err(Error::structural("oscillator takes a single time input"));
        }
        oscillator(x[0], theta)
    }

    fn describe(&self) -> String {
        "oscillator: A*exp(-xi*w0*t)*sin(sqrt(1-xi^2)*w0*t+phi), w0=sqrt(k/m)".into()
    }
}

/// A simulator living in another process.
///
/// Each evaluation spawns `command`, writes one line `x_1 … x_d θ_1 … θ_p`
/// to its standard input and reads a single finite number back from its
/// standard output.
#[derive(Debug, Clone)]
pub struct ExternalCode {
    pub command: Vec<String>,
    pub input_dim: usize,
    pub n_params: usize,
    pub timeout: Duration,
}

impl ExternalCode {
    pub fn new(command: Vec<String>, input_dim: usize, n_params: usize) -> Result<Self> {
        if command.is_empty() || command[0].trim().is_empty() {
            return Err(Error::structural("external code command is empty"));
        }
        Ok(Self {
            command,
            input_dim,
            n_params,
            timeout: Duration::from_secs(60),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn run(&self, line: &str) -> Result<f64> {
        let fail = |message: String, output: String| Error::Simulator { message, output };
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("cannot start {:?}: {e}", self.command[0]), String::new()))?;

        // Drain pipes on helper threads so a chatty child cannot block on a full pipe.
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        if let Some(mut stdin) = child.stdin.take() {
            // A child that never reads its input may close the pipe early.
            let _ = stdin.write_all(line.as_bytes());
        }

        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    let out = out_reader.join().unwrap_or_default();
                    return Err(fail(format!("timed out after {:?}", self.timeout), out));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(1)),
                Err(e) => return Err(fail(format!("wait failed: {e}"), String::new())),
            }
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(fail(
                format!("child exited with {status}"),
                format!("{out}{err}"),
            ));
        }
        let value: f64 = out
            .trim()
            .parse()
            .map_err(|_| fail("child output is not a number".into(), out.clone()))?;
        if !value.is_finite() {
            return Err(fail("child returned a non-finite value".into(), out));
        }
        Ok(value)
    }
}

impl Simulator for ExternalCode {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim || theta.len() != self.n_params {
            return Err(Error::structural(format!(
                "external code expects {} inputs and {} parameters, got {} and {}",
                self.input_dim,
                self.n_params,
                x.len(),
                theta.len()
            )));
        }
        let mut line = x
            .iter()
            .chain(theta)
            .map(|v| format_float(*v))
            .collect::<Vec<_>>()
            .join(" ");
        line.push('\n');
        self.run(&line)
    }

    fn describe(&self) -> String {
        format!("external: {}", self.command.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    const TRUTH: [f64; 5] = [1.0, 0.3, 6.0, 0.05, FRAC_PI_2];

    #[test]
    fn oscillator_at_zero_is_amplitude() {
        assert!((oscillator(0.0, &TRUTH).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oscillator_zero_amplitude() {
        let mut th = TRUTH;
        th[0] = 0.0;
        assert_eq!(oscillator(1.234, &th).unwrap(), 0.0);
    }

    #[test]
    fn oscillator_matches_high_precision_value() {
        // 40-digit evaluation of the closed form with ω₀ = √120 at t = 0.5.
        let expected = 0.094_827_383_249_012_305_292_727_189_349_92;
        assert!((oscillator(0.5, &TRUTH).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn oscillator_domain_errors() {
        for bad in [
            [1.0, 0.3, 6.0, 0.0, 0.0],
            [1.0, 0.3, -6.0, 0.05, 0.0],
            [1.0, 1.0, 6.0, 0.05, 0.0],
            [1.0, -1.2, 6.0, 0.05, 0.0],
        ] {
            assert!(oscillator(0.1, &bad).unwrap_err().is_domain());
        }
        assert!(matches!(oscillator(0.1, &[1.0]), Err(Error::Structural(_))));
    }

    #[test]
    fn undamped_oscillator_is_periodic() {
        let th = [0.7, 0.0, 6.0, 0.05, 0.3];
        let period = 2.0 * PI * (0.05f64 / 6.0).sqrt();
        for i in 0..50 {
            let t = i as f64 * 0.037;
            let a = oscillator(t, &th).unwrap();
            let b = oscillator(t + period, &th).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn oscillator_bounded_by_amplitude(
            t in 0.0f64..20.0,
            a in -3.0f64..3.0,
            xi in 0.0f64..0.999,
            k in 0.1f64..10.0,
            m in 0.01f64..2.0,
            phi in -4.0f64..4.0,
        ) {
            let v = oscillator(t, &[a, xi, k, m, phi]).unwrap();
            proptest::prop_assert!(v.abs() <= a.abs() + 1e-12);
        }
    }

    fn sh(script: &str) -> ExternalCode {
        ExternalCode::new(vec!["sh".into(), "-c".into(), script.into()], 1, 1)
            .unwrap()
            .with_timeout(Duration::from_secs(20))
    }

    #[test]
    fn external_pass_through() {
        let code = sh("cat > /dev/null; echo 3.14");
        assert_eq!(code.eval(&[1.0], &[2.0]).unwrap(), 3.14);
    }

    #[test]
    fn external_failure_carries_output() {
        let code = sh("cat > /dev/null; echo boom; exit 1");
        match code.eval(&[1.0], &[2.0]) {
            Err(Error::Simulator { output, .. }) => assert!(output.contains("boom")),
            other => panic!("expected simulator error, got {other:?}"),
        }
    }

    #[test]
    fn external_garbage_and_timeout() {
        assert!(matches!(
            sh("cat > /dev/null; echo nope").eval(&[1.0], &[2.0]),
            Err(Error::Simulator { .. })
        ));
        let slow = sh("sleep 5; echo 1").with_timeout(Duration::from_millis(200));
        assert!(matches!(slow.eval(&[1.0], &[2.0]), Err(Error::Simulator { .. })));
    }

    #[test]
    fn external_receives_the_input_line() {
        // Echo back the sum of the line to check ordering and formatting.
        let code = ExternalCode::new(
            vec![
                "sh".into(),
                "-c".into(),
                "read a b c; echo \"$c\"".into(),
            ],
            2,
            1,
        )
        .unwrap();
        assert_eq!(code.eval(&[1.0, 2.0], &[0.1]).unwrap(), 0.1);
    }

    #[test]
    fn external_oscillator_matches_in_process() {
        let script = "import math,sys\n\
            t,A,xi,k,m,phi=map(float,sys.stdin.readline().split())\n\
            w0=math.sqrt(k/m)\n\
            print(repr(A*math.exp(-xi*w0*t)*math.sin(math.sqrt(1-xi*xi)*w0*t+phi)))\n";
        let code = ExternalCode::new(vec!["python3".into(), "-c".into(), script.into()], 1, 5)
            .unwrap()
            .with_timeout(Duration::from_secs(30));
        for &t in &[0.0, 0.37, 1.5] {
            let remote = code.eval(&[t], &TRUTH).unwrap();
            let local = oscillator(t, &TRUTH).unwrap();
            assert!((remote - local).abs() < 1e-12, "{remote} vs {local}");
        }
    }
}
