use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::hash;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Settable clock for tests.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        Self(Mutex::new(at))
    }

    pub fn advance(&self, by: Duration) {
        let mut t = self.0.lock().unwrap();
        *t += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scope {
    Query,
    Retrieve,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub scopes: Vec<Scope>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("invalid credentials")]
    AccountUnknown,
    #[error("token expired")]
    TokenExpired,
    #[error("invalid token")]
    InvalidToken,
    #[error("token lacks {0:?} scope")]
    MissingScope(Scope),
    #[error("credential file line {0}: expected `identifier:secret`")]
    BadCredentialFile(usize),
}

/// Account table: identifier → SHA-256 of the secret.
#[derive(Clone, Debug, Default)]
pub struct CredentialTable {
    accounts: HashMap<String, [u8; 32]>,
}

impl CredentialTable {
    /// Parses `identifier:secret` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self, AuthError> {
        let mut table = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, secret) = line
                .split_once(':')
                .filter(|(id, s)| !id.is_empty() && !s.is_empty())
                .ok_or(AuthError::BadCredentialFile(i + 1))?;
            table.insert(id.trim(), secret.trim());
        }
        Ok(table)
    }

    pub fn insert(&mut self, id: &str, secret: &str) {
        self.accounts.insert(id.to_string(), hash::sha256(secret.as_bytes()));
    }

    /// Both failure modes cost the same digest + compare.
    fn verify(&self, id: &str, secret: &str) -> Result<(), AuthError> {
        let presented = hash::sha256(secret.as_bytes());
        match self.accounts.get(id) {
            Some(stored) => {
                if hash::ct_eq(stored, &presented) {
                    Ok(())
                } else {
                    Err(AuthError::InvalidCredentials)
                }
            }
            None => {
                let dummy = [0u8; 32];
                let _ = hash::ct_eq(&dummy, &presented);
                Err(AuthError::AccountUnknown)
            }
        }
    }
}

pub struct Authenticator {
    credentials: CredentialTable,
    ttl: Duration,
    clock: Arc<dyn Clock>,
    tokens: Mutex<HashMap<String, AuthToken>>,
}

impl Authenticator {
    pub fn new(credentials: CredentialTable, ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            credentials,
            ttl,
            clock,
            tokens: Mutex::new(HashMap::new()),
        }
    }

    pub fn authenticate(&self, id: &str, secret: &str) -> Result<AuthToken, AuthError> {
        self.credentials.verify(id, secret)?;
        let mut raw = [0u8; 32];
        rand::rng().fill_bytes(&mut raw);
        let now = self.clock.now();
        let token = AuthToken {
            token: hex::encode(raw),
            expires_at: now + chrono::Duration::from_std(self.ttl).expect("ttl in range"),
            scopes: vec![Scope::Query, Scope::Retrieve],
        };
        let mut tokens = self.tokens.lock().unwrap();
        tokens.retain(|_, t| t.expires_at > now);
        tokens.insert(token.token.clone(), token.clone());
        Ok(token)
    }

    pub fn check(&self, token: &str, scope: Scope) -> Result<(), AuthError> {
        let tokens = self.tokens.lock().unwrap();
        let t = tokens.get(token).ok_or(AuthError::InvalidToken)?;
        if self.clock.now() >= t.expires_at {
            return Err(AuthError::TokenExpired);
        }
        if !t.scopes.contains(&scope) {
            return Err(AuthError::MissingScope(scope));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn auth(clock: Arc<ManualClock>) -> Authenticator {
        let creds = CredentialTable::parse("# accounts\nchips:s3cret\n").unwrap();
        Authenticator::new(creds, Duration::from_secs(1), clock)
    }

    #[test]
    fn issues_token_with_ttl_and_both_scopes() {
        let t0 = Utc::now();
        let clock = Arc::new(ManualClock::new(t0));
        let a = auth(clock.clone());
        let tok = a.authenticate("chips", "s3cret").unwrap();
        assert_eq!(tok.expires_at, t0 + chrono::Duration::seconds(1));
        assert!(a.check(&tok.token, Scope::Query).is_ok());
        assert!(a.check(&tok.token, Scope::Retrieve).is_ok());
    }

    #[test]
    fn bad_secret_and_unknown_account_look_alike() {
        let a = auth(Arc::new(ManualClock::new(Utc::now())));
        let e1 = a.authenticate("chips", "wrong").unwrap_err();
        let e2 = a.authenticate("nobody", "s3cret").unwrap_err();
        assert_eq!(e1.to_string(), e2.to_string());
    }

    #[test]
    fn expired_token_rejected() {
        let clock = Arc::new(ManualClock::new(Utc::now()));
        let a = auth(clock.clone());
        let tok = a.authenticate("chips", "s3cret").unwrap();
        clock.advance(Duration::from_secs(1));
        assert_eq!(a.check(&tok.token, Scope::Query), Err(AuthError::TokenExpired));
        assert_eq!(a.check("bogus", Scope::Query), Err(AuthError::InvalidToken));
    }

    #[test]
    fn credential_file_errors() {
        assert_eq!(
            CredentialTable::parse("ok:1\nbroken\n").unwrap_err(),
            AuthError::BadCredentialFile(2)
        );
    }
}
