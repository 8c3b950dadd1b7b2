import { ApiClient } from './api.js';
import { AppElements, startApp } from './app.js';

const params = new URLSearchParams(window.location.search);
const base = params.get('api') ?? 'http://127.0.0.1:8080';

const el: AppElements = {
  input: document.querySelector('#query')!,
  list: document.querySelector('#suggestions')!,
  history: document.querySelector('#history')!,
  banner: document.querySelector('#banner')!,
  debugToggle: document.querySelector('#debug-toggle')!,
  debugPanel: document.querySelector('#debug-panel')!,
};

startApp(el, new ApiClient(base));
